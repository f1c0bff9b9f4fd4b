#include "xrec/cli.hpp"

#include "xrec/adapter.hpp"
#include "xrec/datagen.hpp"
#include "xrec/emissions.hpp"
#include "xrec/eval.hpp"
#include "xrec/graph.hpp"
#include "xrec/lm.hpp"
#include "xrec/pipeline.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>

namespace fs = std::filesystem;

namespace xrec {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

template <typename T>
std::string render_value(const T& v) {
  std::ostringstream out;
  out << std::boolalpha << std::setprecision(17) << v;
  return out.str();
}

/// Registry tying each command-line option to a config-file key, so file
/// values can back-fill options the user did not pass and the effective
/// configuration can be echoed into run_config.
class OptionSet {
 public:
  template <typename T>
  CLI::Option* add(CLI::App& cmd, const std::string& flag, T& var, const std::string& desc) {
    CLI::Option* opt = cmd.add_option(flag, var, desc);
    entries_.push_back(Entry{flag.substr(2), opt,
                             [&var](const std::string& s) {
                               T parsed{};
                               if (!CLI::detail::lexical_cast(s, parsed)) return false;
                               var = parsed;
                               return true;
                             },
                             [&var] { return render_value(var); }});
    return opt;
  }

  CLI::Option* add_flag(CLI::App& cmd, const std::string& flag, bool& var,
                        const std::string& desc) {
    CLI::Option* opt = cmd.add_flag(flag, var, desc);
    entries_.push_back(Entry{flag.substr(2), opt,
                             [&var](const std::string& s) {
                               bool parsed{};
                               if (!CLI::detail::lexical_cast(s, parsed)) return false;
                               var = parsed;
                               return true;
                             },
                             [&var] { return render_value(var); }});
    return opt;
  }

  /// Applies file values to every option the command line left untouched.
  void apply_file(const std::map<std::string, std::string>& values) {
    for (Entry& e : entries_) {
      auto it = values.find(e.key);
      if (it == values.end() || e.opt->count() > 0) continue;
      if (!e.set(it->second))
        throw CliError("config value for \"" + e.key + "\" is not parseable: " + it->second);
    }
  }

  std::map<std::string, std::string> effective() const {
    std::map<std::string, std::string> out;
    for (const Entry& e : entries_) out[e.key] = e.get();
    return out;
  }

 private:
  struct Entry {
    std::string key;
    CLI::Option* opt;
    std::function<bool(const std::string&)> set;
    std::function<std::string()> get;
  };
  std::vector<Entry> entries_;
};

/// Shared scaffolding for one subcommand: its option registry, the --config
/// option, and the run_config echo.
struct CommandContext {
  CLI::App* cmd = nullptr;
  OptionSet options;
  std::string config_path;

  void add_config_option() {
    cmd->add_option("--config", config_path, "flat key = value configuration file");
  }

  void resolve_config() {
    if (!config_path.empty()) options.apply_file(parse_config_file(config_path));
  }

  /// Echoes the effective configuration, merged over whatever run_config the
  /// directory already holds so earlier stages' records survive.
  void echo_run_config(const std::string& path, const std::string& command,
                       const std::map<std::string, std::string>& extra = {}) const {
    std::map<std::string, std::string> entries;
    if (fs::exists(path)) entries = parse_config_file(path);
    for (const auto& [k, v] : options.effective()) entries[k] = v;
    for (const auto& [k, v] : extra) entries[k] = v;
    entries["command"] = command;
    write_run_config(path, entries);
  }
};

/// Wall-clock timer feeding the emissions ledger.
class RunTimer {
 public:
  RunTimer() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

void record_emissions(const std::string& csv_path, const std::string& command,
                      const std::string& gpu_profile, double seconds) {
  EmissionsParams params;
  params.power_kw = gpu_profile_power_kw(gpu_profile);
  params.hours = seconds / 3600.0;
  append_emissions_csv(csv_path, command, gpu_profile, seconds, emissions_estimate(params));
}

/// Seeded-shuffle prefix of ceil(fraction * n) elements.
template <typename T>
std::vector<T> take_fraction(std::vector<T> v, double fraction, unsigned long long seed) {
  if (fraction <= 0.0 || fraction > 1.0) throw CliError("--fraction must be in (0, 1]");
  if (fraction >= 1.0) return v;
  std::mt19937_64 rng(seed);
  std::shuffle(v.begin(), v.end(), rng);
  auto n = static_cast<std::size_t>(
      std::ceil(fraction * static_cast<double>(v.size())));
  v.resize(std::min(n, v.size()));
  return v;
}

std::vector<ExplanationSample> split_samples(const std::vector<ExplanationSample>& all,
                                             const std::string& split) {
  if (split != "train" && split != "valid" && split != "test")
    throw CliError("unknown split \"" + split + "\" (expected train, valid, or test)");
  std::vector<ExplanationSample> out;
  for (const ExplanationSample& s : all)
    if (s.split == split) out.push_back(s);
  if (out.empty()) throw CliError("split \"" + split + "\" holds no samples");
  return out;
}

void require_file(const std::string& path, const std::string& hint) {
  if (!fs::exists(path)) throw CliError("missing file " + path + " — " + hint);
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenDataArgs {
  CommandContext ctx;
  std::string out;
  WorldConfig world;
};

void setup_gen_data(CLI::App& app, GenDataArgs& a) {
  a.ctx.cmd = app.add_subcommand("gen-data", "generate a synthetic interaction dataset");
  OptionSet& o = a.ctx.options;
  CLI::App& c = *a.ctx.cmd;
  o.add(c, "--out", a.out, "output dataset directory")->required();
  o.add(c, "--seed", a.world.seed, "world seed");
  o.add(c, "--num-users", a.world.num_users, "number of users");
  o.add(c, "--num-items", a.world.num_items, "number of items");
  o.add(c, "--num-topics", a.world.num_topics, "number of latent topics");
  o.add(c, "--interactions-per-user", a.world.interactions_per_user,
        "interactions sampled per user");
  o.add(c, "--train-frac", a.world.train_fraction, "training split fraction");
  o.add(c, "--valid-frac", a.world.valid_fraction, "validation split fraction");
  o.add(c, "--test-frac", a.world.test_fraction, "test split fraction");
  a.ctx.add_config_option();

  a.ctx.cmd->callback([&a] {
    a.ctx.resolve_config();
    World world = generate_world(a.world);
    write_dataset(a.out, world.samples, world.profiles);
    a.ctx.echo_run_config((fs::path(a.out) / "run_config").string(), "gen-data");
    std::cout << "wrote " << world.samples.size() << " samples for "
              << a.world.num_users << " users x " << a.world.num_items << " items to " << a.out
              << "\n";
  });
}

// ---------------------------------------------------------------------------
// train-gnn
// ---------------------------------------------------------------------------

struct TrainGnnArgs {
  CommandContext ctx;
  std::string data;
  std::string out;
  GnnConfig gnn;
  int k_core = 0;
  std::string gpu_profile = "h100";
  std::string emissions_csv = "emissions.csv";
};

void setup_train_gnn(CLI::App& app, TrainGnnArgs& a) {
  a.ctx.cmd = app.add_subcommand("train-gnn", "train collaborative-filtering embeddings");
  OptionSet& o = a.ctx.options;
  CLI::App& c = *a.ctx.cmd;
  o.add(c, "--data", a.data, "dataset directory from gen-data")->required();
  o.add(c, "--out", a.out, "checkpoint directory")->required();
  o.add(c, "--layers", a.gnn.num_layers, "propagation layers");
  o.add(c, "--embed-dim", a.gnn.embed_dim, "embedding dimension");
  o.add(c, "--learning-rate", a.gnn.learning_rate, "optimizer step size");
  o.add(c, "--l2", a.gnn.l2_lambda, "L2 regularization strength");
  o.add(c, "--epochs", a.gnn.epochs, "maximum training epochs");
  o.add(c, "--seed", a.gnn.seed, "initialization/sampling seed");
  o.add(c, "--k-core", a.k_core, "k-core filter before training (0 = off)");
  o.add(c, "--gpu-profile", a.gpu_profile, "device power profile (h100, a100_mig)");
  o.add(c, "--emissions-csv", a.emissions_csv, "emissions ledger path");
  a.ctx.add_config_option();

  a.ctx.cmd->callback([&a] {
    a.ctx.resolve_config();
    RunTimer timer;
    auto [samples, profiles] = load_dataset(a.data);
    int num_users = static_cast<int>(profiles.users.size());
    int num_items = static_cast<int>(profiles.items.size());
    std::vector<std::pair<int, int>> edges;
    for (const ExplanationSample& s : samples)
      if (s.split == "train") edges.emplace_back(s.uid, s.iid);
    InteractionGraph graph = InteractionGraph::build(num_users, num_items, edges);

    EmbeddingTable table;
    if (a.k_core >= 2) {
      KCoreResult core = k_core_filter(graph, a.k_core);
      if (core.graph.empty())
        throw CliError("k-core filtering with k=" + std::to_string(a.k_core) +
                       " removed every node; lower --k-core");
      EmbeddingTable sub = train_gnn(core.graph, a.gnn);
      table.user_vectors = Mat::Zero(num_users, a.gnn.embed_dim);
      table.item_vectors = Mat::Zero(num_items, a.gnn.embed_dim);
      for (std::size_t i = 0; i < core.user_ids.size(); ++i)
        table.user_vectors.row(core.user_ids[i]) = sub.user_vectors.row(static_cast<long>(i));
      for (std::size_t i = 0; i < core.item_ids.size(); ++i)
        table.item_vectors.row(core.item_ids[i]) = sub.item_vectors.row(static_cast<long>(i));
      std::cout << "k-core kept " << core.user_ids.size() << "/" << num_users << " users, "
                << core.item_ids.size() << "/" << num_items
                << " items; filtered nodes keep zero vectors\n";
    } else {
      table = train_gnn(graph, a.gnn);
    }

    fs::create_directories(a.out);
    save_embeddings((fs::path(a.out) / "gnn_embeddings.bin").string(), table);
    a.ctx.echo_run_config((fs::path(a.out) / "run_config").string(), "train-gnn");
    record_emissions(a.emissions_csv, "train-gnn", a.gpu_profile, timer.seconds());
    std::cout << "trained embeddings for " << num_users << " users and " << num_items
              << " items (" << a.gnn.embed_dim << " dims) -> " << a.out << "\n";
  });
}

// ---------------------------------------------------------------------------
// train-adapter
// ---------------------------------------------------------------------------

struct TrainAdapterArgs {
  CommandContext ctx;
  std::string data;
  std::string out;
  std::string lm_path;         // optional shared language-model checkpoint
  std::string embeddings_path; // optional shared embedding table
  std::string ablation = "full";
  TrainConfig train;
  int num_experts = 8;
  double dropout = 0.2;
  double noise = 0.01;
  int fixed_in_dim = 32;  // adapter input width when no embedding table is used
  ToyLmConfig lm;
  std::string gpu_profile = "h100";
  std::string emissions_csv = "emissions.csv";
};

/// Full prompt+target training texts for the language model, one per sample.
std::vector<std::string> pretrain_corpus(const std::vector<ExplanationSample>& samples,
                                         const Profiles& profiles) {
  AblationFlags full;
  std::vector<std::string> corpus;
  corpus.reserve(samples.size());
  for (const ExplanationSample& s : samples) {
    PromptSpec spec = assemble_prompt(s, profiles, full);
    corpus.push_back(spec.template_text + " " + s.explanation);
  }
  return corpus;
}

/// Loads the shared language model, or pretrains and stores it. A checkpoint
/// inside `out` wins; otherwise `lm_path` is reused when present, and a fresh
/// model is written to both locations.
ToyLm obtain_lm(const TrainAdapterArgs& a, const std::vector<ExplanationSample>& train_samples,
                const Profiles& profiles) {
  std::string local = (fs::path(a.out) / "lm.bin").string();
  if (fs::exists(local)) return load_lm(local);
  if (!a.lm_path.empty() && fs::exists(a.lm_path)) {
    ToyLm lm = load_lm(a.lm_path);
    fs::copy_file(a.lm_path, local, fs::copy_options::overwrite_existing);
    return lm;
  }
  std::cout << "pretraining language model on " << train_samples.size() << " texts...\n";
  ToyLm lm = pretrain_lm(pretrain_corpus(train_samples, profiles), a.lm);
  save_lm(local, lm);
  if (!a.lm_path.empty()) save_lm(a.lm_path, lm);
  return lm;
}

void setup_train_adapter(CLI::App& app, TrainAdapterArgs& a) {
  a.ctx.cmd = app.add_subcommand("train-adapter",
                                 "train the collaborative adapters against the frozen model");
  OptionSet& o = a.ctx.options;
  CLI::App& c = *a.ctx.cmd;
  o.add(c, "--data", a.data, "dataset directory from gen-data")->required();
  o.add(c, "--out", a.out, "checkpoint directory")->required();
  o.add(c, "--lm", a.lm_path, "shared language-model checkpoint to reuse or create");
  o.add(c, "--embeddings", a.embeddings_path,
        "embedding table from another checkpoint to copy in");
  o.add(c, "--ablation", a.ablation,
        "variant: full, wo-injection, wo-embeddings, wo-profiles, fixed-moe");
  o.add(c, "--epochs", a.train.epochs, "passes over the training split");
  o.add(c, "--batch-size", a.train.batch_size, "samples per step (fixed at 1)");
  o.add(c, "--learning-rate", a.train.learning_rate, "adapter step size");
  o.add(c, "--weight-decay", a.train.weight_decay, "decoupled weight decay");
  o.add(c, "--seed", a.train.seed, "adapter init/noise seed");
  o.add(c, "--num-experts", a.num_experts, "experts per adapter");
  o.add(c, "--dropout", a.dropout, "adapter output dropout rate");
  o.add(c, "--noise", a.noise, "gate logit noise factor");
  o.add(c, "--fixed-in-dim", a.fixed_in_dim, "adapter input width when no embeddings are used");
  o.add(c, "--d-lm", a.lm.d_lm, "model width (pretraining only)");
  o.add(c, "--lm-layers", a.lm.n_layers, "decoder blocks (pretraining only)");
  o.add(c, "--lm-heads", a.lm.n_heads, "attention heads (pretraining only)");
  o.add(c, "--max-seq-len", a.lm.max_seq_len, "context length (pretraining only)");
  o.add(c, "--lm-epochs", a.lm.max_epochs, "pretraining epoch cap");
  o.add(c, "--lm-lr", a.lm.pretrain_lr, "pretraining step size");
  o.add(c, "--lm-seed", a.lm.seed, "language-model init seed");
  o.add(c, "--gpu-profile", a.gpu_profile, "device power profile (h100, a100_mig)");
  o.add(c, "--emissions-csv", a.emissions_csv, "emissions ledger path");
  a.ctx.add_config_option();

  a.ctx.cmd->callback([&a] {
    a.ctx.resolve_config();
    RunTimer timer;
    AblationFlags flags = parse_ablation(a.ablation);
    auto [samples, profiles] = load_dataset(a.data);
    std::vector<ExplanationSample> train_samples = split_samples(samples, "train");
    fs::create_directories(a.out);

    ToyLm lm = obtain_lm(a, train_samples, profiles);

    EmbeddingTable table;
    int in_dim = a.fixed_in_dim;
    if (flags.use_embeddings && !flags.fixed_moe_inputs) {
      std::string emb = (fs::path(a.out) / "gnn_embeddings.bin").string();
      if (!fs::exists(emb) && !a.embeddings_path.empty() && fs::exists(a.embeddings_path))
        fs::copy_file(a.embeddings_path, emb);
      require_file(emb, "run train-gnn with the same --out first, or pass --embeddings");
      table = load_embeddings(emb);
      in_dim = static_cast<int>(table.user_vectors.cols());
    }

    AdapterConfig acfg;
    acfg.num_experts = a.num_experts;
    acfg.in_dim = in_dim;
    acfg.out_dim = lm.config.d_lm;
    acfg.dropout_rate = a.dropout;
    acfg.noise_factor = a.noise;
    acfg.seed = a.train.seed;
    std::mt19937_64 rng(static_cast<unsigned long long>(a.train.seed));
    MoeAdapter user_adapter(acfg, rng);
    MoeAdapter item_adapter(acfg, rng);

    std::vector<LossTraceRow> trace =
        train_adapter(lm, user_adapter, item_adapter, table, train_samples, profiles, a.train,
                      flags);

    save_adapters((fs::path(a.out) / "adapters.bin").string(), user_adapter, item_adapter);
    write_loss_trace((fs::path(a.out) / "loss_trace.csv").string(), trace);
    a.ctx.echo_run_config((fs::path(a.out) / "run_config").string(), "train-adapter",
                          {{"use_profiles", render_value(flags.use_profiles)},
                           {"use_injection", render_value(flags.use_injection)},
                           {"use_embeddings", render_value(flags.use_embeddings)},
                           {"fixed_moe_inputs", render_value(flags.fixed_moe_inputs)}});
    record_emissions(a.emissions_csv, "train-adapter", a.gpu_profile, timer.seconds());
    std::cout << "adapter training processed " << trace.size() << " samples (final loss "
              << (trace.empty() ? 0.0 : trace.back().loss) << ") -> " << a.out << "\n";
  });
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

struct GenerateArgs {
  CommandContext ctx;
  std::string checkpoint;
  std::string data;
  std::string out;
  std::string split = "test";
  std::string ablation;  // default: checkpoint's run_config
  int max_new = 48;
  bool sample = false;
  double temperature = 1.0;
  unsigned long long seed = 1;
  double fraction = 1.0;
  int n_jobs = 1;
  std::string gpu_profile = "h100";
  std::string emissions_csv = "emissions.csv";
};

void setup_generate(CLI::App& app, GenerateArgs& a) {
  a.ctx.cmd = app.add_subcommand("generate", "generate explanations for a dataset split");
  OptionSet& o = a.ctx.options;
  CLI::App& c = *a.ctx.cmd;
  o.add(c, "--checkpoint", a.checkpoint, "checkpoint directory from train-adapter")->required();
  o.add(c, "--data", a.data, "dataset directory from gen-data")->required();
  o.add(c, "--out", a.out, "output JSONL path")->required();
  o.add(c, "--split", a.split, "dataset split to explain");
  o.add(c, "--ablation", a.ablation, "variant override (default: checkpoint run_config)");
  o.add(c, "--max-new", a.max_new, "maximum generated tokens");
  o.add_flag(c, "--sample", a.sample, "sample with temperature instead of greedy decoding");
  o.add(c, "--temperature", a.temperature, "softmax temperature when sampling");
  o.add(c, "--seed", a.seed, "decoding seed");
  o.add(c, "--fraction", a.fraction, "seeded-shuffle fraction of the split to use");
  o.add(c, "--n-jobs", a.n_jobs, "worker threads");
  o.add(c, "--gpu-profile", a.gpu_profile, "device power profile (h100, a100_mig)");
  o.add(c, "--emissions-csv", a.emissions_csv, "emissions ledger path");
  a.ctx.add_config_option();

  a.ctx.cmd->callback([&a] {
    a.ctx.resolve_config();
    RunTimer timer;
    std::string run_config_path = (fs::path(a.checkpoint) / "run_config").string();
    if (a.ablation.empty()) {
      require_file(run_config_path, "run train-adapter first or pass --ablation");
      std::map<std::string, std::string> rc = parse_config_file(run_config_path);
      auto it = rc.find("ablation");
      if (it == rc.end())
        throw CliError(run_config_path + " records no ablation; pass --ablation");
      a.ablation = it->second;
    }
    AblationFlags flags = parse_ablation(a.ablation);

    std::string lm_path = (fs::path(a.checkpoint) / "lm.bin").string();
    require_file(lm_path, "run train-adapter first");
    ToyLm lm = load_lm(lm_path);
    std::string ad_path = (fs::path(a.checkpoint) / "adapters.bin").string();
    require_file(ad_path, "run train-adapter first");
    auto [user_adapter, item_adapter] = load_adapters(ad_path);

    EmbeddingTable table;
    if (flags.use_embeddings && !flags.fixed_moe_inputs) {
      std::string emb = (fs::path(a.checkpoint) / "gnn_embeddings.bin").string();
      require_file(emb, "run train-gnn first");
      table = load_embeddings(emb);
    }

    auto [samples, profiles] = load_dataset(a.data);
    std::vector<ExplanationSample> chosen =
        take_fraction(split_samples(samples, a.split), a.fraction, a.seed);

    DecodeMode decode;
    decode.greedy = !a.sample;
    decode.temperature = a.temperature;
    GenerationResult result =
        generate_explanations(lm, user_adapter, item_adapter, table, chosen, profiles, flags,
                              decode, a.max_new, a.seed, a.n_jobs);

    long failures = 0;
    for (const GeneratedRow& row : result.rows)
      if (row.error) ++failures;
    write_generated(a.out, result.rows);
    a.ctx.echo_run_config(a.out + ".run_config", "generate");
    record_emissions(a.emissions_csv, "generate", a.gpu_profile, timer.seconds());
    std::cout << "generated " << result.rows.size() << " explanations (" << failures
              << " failed) -> " << a.out << "\n";
  });
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct EvaluateArgs {
  CommandContext ctx;
  std::string generated;
  std::string data;
  std::string checkpoint;
  std::string out;
  std::string split = "test";
  std::string variant;
  double fraction = 1.0;
  unsigned long long seed = 1;
  bool no_judge = false;
  std::string judge_endpoint;  // empty -> deterministic stub
  std::string judge_model = "local-judge";
  double judge_timeout = 30.0;
  int judge_retries = 3;
  int judge_concurrency = 4;
};

/// rows.csv carries the table rows plus summary pseudo-rows (metric names
/// starting with '_') so reports can be merged later without the raw texts.
std::vector<MetricRow> with_summary_rows(const MetricReport& report) {
  std::vector<MetricRow> rows = report.rows;
  rows.push_back(MetricRow{-1, "_usr", report.usr});
  rows.push_back(MetricRow{-1, "_anomaly_count", static_cast<double>(report.anomaly_count)});
  for (const auto& [metric, count] : report.excluded)
    rows.push_back(MetricRow{-1, "_excluded_" + metric, static_cast<double>(count)});
  return rows;
}

MetricReport from_summary_rows(const std::string& variant, const std::vector<MetricRow>& all) {
  std::vector<MetricRow> plain;
  MetricReport report;
  for (const MetricRow& row : all) {
    if (row.metric.rfind("_excluded_", 0) == 0)
      report.excluded[row.metric.substr(std::string("_excluded_").size())] =
          static_cast<long>(row.value);
    else if (row.metric == "_usr")
      report.usr = row.value;
    else if (row.metric == "_anomaly_count")
      report.anomaly_count = static_cast<long>(row.value);
    else if (!row.metric.empty() && row.metric[0] == '_')
      continue;
    else
      plain.push_back(row);
  }
  MetricReport aggregated = aggregate(plain);
  aggregated.variant = variant;
  aggregated.usr = report.usr;
  aggregated.anomaly_count = report.anomaly_count;
  aggregated.excluded = report.excluded;
  return aggregated;
}

void setup_evaluate(CLI::App& app, EvaluateArgs& a) {
  a.ctx.cmd = app.add_subcommand("evaluate", "score generated explanations against ground truth");
  OptionSet& o = a.ctx.options;
  CLI::App& c = *a.ctx.cmd;
  o.add(c, "--generated", a.generated, "generated JSONL from the generate command")->required();
  o.add(c, "--data", a.data, "dataset directory from gen-data")->required();
  o.add(c, "--checkpoint", a.checkpoint, "checkpoint directory holding lm.bin")->required();
  o.add(c, "--out", a.out, "output directory for report.md and rows.csv")->required();
  o.add(c, "--split", a.split, "dataset split holding the ground truth");
  o.add(c, "--variant", a.variant, "table row label (default: generated run_config ablation)");
  o.add(c, "--fraction", a.fraction, "seeded-shuffle fraction of pairs to score");
  o.add(c, "--seed", a.seed, "subsampling seed");
  o.add_flag(c, "--no-judge", a.no_judge, "skip judge scoring");
  o.add(c, "--judge-endpoint", a.judge_endpoint,
        "chat-completion endpoint; empty uses the deterministic stub");
  o.add(c, "--judge-model", a.judge_model, "model name sent to the judge");
  o.add(c, "--judge-timeout", a.judge_timeout, "judge request timeout in seconds");
  o.add(c, "--judge-retries", a.judge_retries, "judge transport retries");
  o.add(c, "--judge-concurrency", a.judge_concurrency, "parallel judge requests");
  a.ctx.add_config_option();

  a.ctx.cmd->callback([&a] {
    a.ctx.resolve_config();
    std::vector<GeneratedRow> generated = load_generated(a.generated);
    auto [samples, profiles] = load_dataset(a.data);
    (void)profiles;
    JoinResult joined = join_generated(generated, split_samples(samples, a.split));
    if (joined.pairs.empty())
      throw CliError("no usable generated rows matched the " + a.split + " split");
    std::vector<EvalPair> pairs = take_fraction(joined.pairs, a.fraction, a.seed);

    std::string lm_path = (fs::path(a.checkpoint) / "lm.bin").string();
    require_file(lm_path, "run train-adapter first");
    ToyLm lm = load_lm(lm_path);

    EvalOptions options;
    options.with_judge = !a.no_judge;
    options.judge.stub_mode = a.judge_endpoint.empty();
    options.judge.endpoint = a.judge_endpoint;
    options.judge.model = a.judge_model;
    options.judge.timeout_seconds = a.judge_timeout;
    options.judge.max_retries = a.judge_retries;
    options.judge.concurrency = a.judge_concurrency;
    if (a.variant.empty()) {
      std::string rc_path = a.generated + ".run_config";
      a.variant = "run";
      if (fs::exists(rc_path)) {
        std::map<std::string, std::string> rc = parse_config_file(rc_path);
        auto it = rc.find("ablation");
        if (it != rc.end() && !it->second.empty()) a.variant = it->second;
      }
    }
    options.variant = a.variant;

    MetricReport report = evaluate_pairs(pairs, lm, options);
    fs::create_directories(a.out);
    write_rows_csv((fs::path(a.out) / "rows.csv").string(), with_summary_rows(report));
    std::ofstream md((fs::path(a.out) / "report.md").string());
    if (!md) throw CliError("cannot write report.md in " + a.out);
    md << render_report({report});
    md.close();
    a.ctx.echo_run_config((fs::path(a.out) / "run_config").string(), "evaluate",
                          {{"skipped-rows", std::to_string(joined.skipped)}});
    std::cout << "scored " << pairs.size() << " pairs (" << joined.skipped
              << " generated rows skipped) -> " << a.out << "\n";
  });
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct ReportArgs {
  CommandContext ctx;
  std::vector<std::string> rows_specs;  // label=path/to/rows.csv
  std::string external;                 // optional csv: variant,mean,std
  std::string out = "report.md";
};

void setup_report(CLI::App& app, ReportArgs& a) {
  a.ctx.cmd = app.add_subcommand("report", "merge rows.csv files into one comparison table");
  CLI::App& c = *a.ctx.cmd;
  c.add_option("--rows", a.rows_specs, "label=path pairs of rows.csv files")
      ->required()
      ->expected(-1);
  a.ctx.options.add(c, "--external", a.external,
                    "externally computed scores csv (variant,mean,std)");
  a.ctx.options.add(c, "--out", a.out, "output markdown path");
  a.ctx.add_config_option();

  a.ctx.cmd->callback([&a] {
    a.ctx.resolve_config();
    std::vector<MetricReport> reports;
    for (const std::string& spec : a.rows_specs) {
      std::size_t eq = spec.find('=');
      if (eq == std::string::npos)
        throw CliError("--rows expects label=path, got \"" + spec + "\"");
      std::string label = spec.substr(0, eq);
      std::string path = spec.substr(eq + 1);
      reports.push_back(from_summary_rows(label, read_rows_csv(path)));
    }
    std::map<std::string, ExternalScore> external;
    if (!a.external.empty()) {
      std::ifstream in(a.external);
      if (!in) throw CliError("cannot read " + a.external);
      std::string line;
      long line_no = 0;
      while (std::getline(in, line)) {
        ++line_no;
        std::string t = trim(line);
        if (t.empty() || (line_no == 1 && t.rfind("variant", 0) == 0)) continue;
        std::istringstream ss(t);
        std::string variant, mean_s, std_s;
        if (!std::getline(ss, variant, ',') || !std::getline(ss, mean_s, ',') ||
            !std::getline(ss, std_s))
          throw CliError(a.external + ":" + std::to_string(line_no) + ": expected variant,mean,std");
        try {
          external[variant] = ExternalScore{std::stod(mean_s), std::stod(std_s)};
        } catch (const std::exception&) {
          throw CliError(a.external + ":" + std::to_string(line_no) + ": expected variant,mean,std");
        }
      }
    }
    std::ofstream md(a.out);
    if (!md) throw CliError("cannot write " + a.out);
    md << render_report(reports, external);
    md.close();
    std::cout << "merged " << reports.size() << " variant(s) -> " << a.out << "\n";
  });
}

// ---------------------------------------------------------------------------
// emissions
// ---------------------------------------------------------------------------

struct EmissionsArgs {
  CommandContext ctx;
  double hours = 0.0;
  std::string gpu_profile = "h100";
  double power = 0.0;  // overrides the profile when > 0
  EmissionsParams params;
};

void setup_emissions(CLI::App& app, EmissionsArgs& a) {
  a.ctx.cmd = app.add_subcommand("emissions", "estimate kg CO2e for a run");
  OptionSet& o = a.ctx.options;
  CLI::App& c = *a.ctx.cmd;
  o.add(c, "--hours", a.hours, "runtime in hours")->required();
  o.add(c, "--gpu-profile", a.gpu_profile, "device power profile (h100, a100_mig)");
  o.add(c, "--power", a.power, "device power in kW (overrides --gpu-profile)");
  o.add(c, "--carbon-intensity", a.params.carbon_intensity, "kg CO2e per kWh");
  o.add(c, "--pue", a.params.pue, "power usage effectiveness");
  a.ctx.add_config_option();

  a.ctx.cmd->callback([&a] {
    a.ctx.resolve_config();
    a.params.power_kw = a.power > 0.0 ? a.power : gpu_profile_power_kw(a.gpu_profile);
    a.params.hours = a.hours;
    std::ostringstream out;
    out << std::setprecision(10) << emissions_estimate(a.params);
    std::cout << out.str() << " kg CO2e\n";
  });
}

}  // namespace

std::map<std::string, std::string> parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CliError("cannot read config file " + path);
  std::map<std::string, std::string> values;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw CliError(path + ":" + std::to_string(line_no) + ": expected key = value");
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (key.empty())
      throw CliError(path + ":" + std::to_string(line_no) + ": empty key");
    values[key] = value;
  }
  return values;
}

void write_run_config(const std::string& path,
                      const std::map<std::string, std::string>& entries) {
  std::ofstream out(path);
  if (!out) throw CliError("cannot write " + path);
  for (const auto& [key, value] : entries) out << key << " = " << value << "\n";
  if (!out) throw CliError("write failed: " + path);
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"explainable-recommendation pipeline"};
  app.require_subcommand(1);

  GenDataArgs gen_data;
  TrainGnnArgs train_gnn_args;
  TrainAdapterArgs train_adapter_args;
  GenerateArgs generate_args;
  EvaluateArgs evaluate_args;
  ReportArgs report_args;
  EmissionsArgs emissions_args;

  setup_gen_data(app, gen_data);
  setup_train_gnn(app, train_gnn_args);
  setup_train_adapter(app, train_adapter_args);
  setup_generate(app, generate_args);
  setup_evaluate(app, evaluate_args);
  setup_report(app, report_args);
  setup_emissions(app, emissions_args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace xrec
