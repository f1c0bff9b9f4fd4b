#include "xrec/pipeline.hpp"

#include "xrec/optim.hpp"
#include "xrec/serialize.hpp"

#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <thread>

namespace xrec {

namespace {

constexpr std::uint64_t kEmbedMagic = 0x58524543474e4e31ull;
constexpr std::uint64_t kEmbedVersion = 1;

}  // namespace

EarlyStopState::EarlyStopState(long n)
    : dataset_size(n),
      enabled_after(n / 5),
      patience(std::max(1l, n / 10)),
      best_atl(std::numeric_limits<double>::infinity()) {}

double EarlyStopState::atl() const {
  if (window.empty()) return 0.0;
  double s = 0.0;
  for (double v : window) s += v;
  return s / static_cast<double>(window.size());
}

bool early_stop_update(EarlyStopState& state, double sample_loss) {
  ++state.processed;
  state.window.push_back(sample_loss);
  if (state.window.size() > 10) state.window.pop_front();
  if (state.processed <= state.enabled_after) return false;
  double a = state.atl();
  if (a < state.best_atl) {
    state.best_atl = a;
    state.samples_since_best = 0;
    return false;
  }
  ++state.samples_since_best;
  return state.samples_since_best >= state.patience;
}

AblationFlags parse_ablation(const std::string& name) {
  AblationFlags f;
  if (name == "full") return f;
  if (name == "wo-injection") {
    f.use_injection = false;
    return f;
  }
  if (name == "wo-embeddings") {
    f.use_embeddings = false;
    return f;
  }
  if (name == "wo-profiles") {
    f.use_profiles = false;
    return f;
  }
  if (name == "fixed-moe") {
    f.fixed_moe_inputs = true;
    return f;
  }
  throw DataError("unknown ablation \"" + name +
                  "\" (expected full, wo-injection, wo-embeddings, wo-profiles, fixed-moe)");
}

std::string ablation_name(const AblationFlags& f) {
  if (f.use_profiles && f.use_injection && f.use_embeddings && !f.fixed_moe_inputs) return "full";
  if (f.use_profiles && !f.use_injection && f.use_embeddings && !f.fixed_moe_inputs)
    return "wo-injection";
  if (f.use_profiles && !f.use_embeddings && !f.fixed_moe_inputs) return "wo-embeddings";
  if (!f.use_profiles && f.use_injection && f.use_embeddings && !f.fixed_moe_inputs)
    return "wo-profiles";
  if (f.use_profiles && f.use_injection && f.use_embeddings && f.fixed_moe_inputs)
    return "fixed-moe";
  return "custom";
}

PromptSpec assemble_prompt(const ExplanationSample& sample, const Profiles& profiles,
                           const AblationFlags& flags) {
  PromptSpec spec;
  std::string t;
  if (flags.use_embeddings) t += "<USER_EMBED> <ITEM_EMBED> ";
  if (flags.use_profiles) {
    const UserProfile* up = profiles.find_user(sample.uid);
    if (!up)
      throw DataError("assemble_prompt: missing profile for user " + std::to_string(sample.uid));
    const ItemProfile* ip = profiles.find_item(sample.iid);
    if (!ip)
      throw DataError("assemble_prompt: missing profile for item " + std::to_string(sample.iid));
    spec.user_profile = up->profile;
    spec.item_profile = ip->title + " . " + ip->description;
    t += "user profile : " + *spec.user_profile + " item profile : " + *spec.item_profile + " ";
  }
  t += "explain why the user would enjoy the item :";
  spec.template_text = std::move(t);
  if (!sample.explanation.empty()) spec.target = sample.explanation;
  return spec;
}

namespace {

struct SampleBatch {
  std::vector<int> prompt_ids;
  InjectionMap injections;
};

/// Looks up (or fixes) the adapter inputs for one sample. When the adapted
/// vectors never reach the model input, fixed inputs stand in so no
/// embedding table is required.
std::pair<Mat, Mat> adapter_inputs(const EmbeddingTable& embeddings, int uid, int iid,
                                   const AblationFlags& flags, const Mat& fixed_user,
                                   const Mat& fixed_item) {
  if (flags.fixed_moe_inputs || !flags.use_embeddings) return {fixed_user, fixed_item};
  if (uid < 0 || uid >= embeddings.user_vectors.rows())
    throw DataError("embeddings missing user id " + std::to_string(uid));
  if (iid < 0 || iid >= embeddings.item_vectors.rows())
    throw DataError("embeddings missing item id " + std::to_string(iid));
  return {embeddings.user_vectors.row(uid), embeddings.item_vectors.row(iid)};
}

/// Tokenizes the prompt and attaches the adapted vectors at the slots.
SampleBatch build_batch(const ToyLm& lm, const PromptSpec& spec, const Tensor& user_vec,
                        const Tensor& item_vec, const AblationFlags& flags) {
  SampleBatch b;
  b.prompt_ids.push_back(Vocab::kBos);
  for (int id : tokenize(spec.template_text, lm.vocab)) b.prompt_ids.push_back(id);
  if (flags.use_embeddings) {
    for (std::size_t p = 0; p < b.prompt_ids.size(); ++p) {
      if (b.prompt_ids[p] == Vocab::kUserEmbed)
        b.injections.emplace(static_cast<long>(p), user_vec);
      else if (b.prompt_ids[p] == Vocab::kItemEmbed)
        b.injections.emplace(static_cast<long>(p), item_vec);
    }
  }
  return b;
}

}  // namespace

std::vector<LossTraceRow> train_adapter(const ToyLm& lm, MoeAdapter& user_adapter,
                                        MoeAdapter& item_adapter,
                                        const EmbeddingTable& embeddings,
                                        const std::vector<ExplanationSample>& samples,
                                        const Profiles& profiles, const TrainConfig& config,
                                        const AblationFlags& flags) {
  if (!lm.frozen) throw TensorError("train_adapter: the language model must be frozen");
  if (config.batch_size != 1)
    throw TensorError("train_adapter: batch_size is fixed at 1");
  if (samples.empty()) throw DataError("train_adapter: no training samples");

  auto [fixed_user, fixed_item] =
      make_fixed_inputs(user_adapter.config.in_dim, user_adapter.config.seed);

  user_adapter.training = true;
  item_adapter.training = true;
  std::vector<Tensor> params = user_adapter.params();
  for (const Tensor& p : item_adapter.params()) params.push_back(p);

  std::mt19937_64 rng(config.seed);
  InjectMode mode =
      flags.use_injection ? InjectMode::kReplaceEveryLayer : InjectMode::kReplaceLayerZeroOnly;

  std::vector<LossTraceRow> trace;
  EarlyStopState stop(static_cast<long>(samples.size()));
  bool stopped = false;

  for (int epoch = 0; epoch < config.epochs && !stopped; ++epoch) {
    for (std::size_t idx = 0; idx < samples.size(); ++idx) {
      const ExplanationSample& sample = samples[idx];
      PromptSpec spec = assemble_prompt(sample, profiles, flags);
      if (!spec.target) throw DataError("train_adapter: sample has no ground-truth target");

      auto [xu, xi] =
          adapter_inputs(embeddings, sample.uid, sample.iid, flags, fixed_user, fixed_item);

      Tape tape;
      Tensor user_vec = adapt(tape, user_adapter, Tensor::leaf(xu), rng);
      Tensor item_vec = adapt(tape, item_adapter, Tensor::leaf(xi), rng);
      SampleBatch batch = build_batch(lm, spec, user_vec, item_vec, flags);
      std::vector<int> target_ids = tokenize(*spec.target, lm.vocab);

      Tensor loss =
          nll_on_target(tape, lm, batch.prompt_ids, batch.injections, target_ids, mode);
      zero_grads(params);
      tape.backward(loss);
      sgd_step(params, config.learning_rate, config.weight_decay);

      double value = loss.item();
      bool stop_now = early_stop_update(stop, value);
      trace.push_back(LossTraceRow{static_cast<long>(trace.size()), value, stop.atl()});
      if (stop_now) {
        stopped = true;
        break;
      }
    }
  }

  user_adapter.training = false;
  item_adapter.training = false;
  return trace;
}

GenerationResult generate_explanations(const ToyLm& lm, const MoeAdapter& user_adapter,
                                       const MoeAdapter& item_adapter,
                                       const EmbeddingTable& embeddings,
                                       const std::vector<ExplanationSample>& samples,
                                       const Profiles& profiles, const AblationFlags& flags,
                                       const DecodeMode& decode, int max_new,
                                       unsigned long long seed, int n_jobs) {
  // Local copies share parameter storage but carry their own mode flag, so
  // the caller's adapters stay untouched and inference is deterministic.
  MoeAdapter ua = user_adapter;
  MoeAdapter ia = item_adapter;
  ua.training = false;
  ia.training = false;

  auto [fixed_user, fixed_item] = make_fixed_inputs(ua.config.in_dim, ua.config.seed);
  InjectMode mode =
      flags.use_injection ? InjectMode::kReplaceEveryLayer : InjectMode::kReplaceLayerZeroOnly;

  GenerationResult result;
  result.rows.resize(samples.size());

  auto run_one = [&](std::size_t idx) {
    const ExplanationSample& sample = samples[idx];
    GeneratedRow row;
    row.uid = sample.uid;
    row.iid = sample.iid;
    try {
      PromptSpec spec = assemble_prompt(sample, profiles, flags);
      auto [xu, xi] =
          adapter_inputs(embeddings, sample.uid, sample.iid, flags, fixed_user, fixed_item);
      std::mt19937_64 dummy(0);  // inference-mode adapt draws nothing
      Tape tape;
      Tensor user_vec = adapt(tape, ua, Tensor::leaf(xu), dummy);
      Tensor item_vec = adapt(tape, ia, Tensor::leaf(xi), dummy);
      SampleBatch batch = build_batch(lm, spec, Tensor::leaf(user_vec.value()),
                                      Tensor::leaf(item_vec.value()), flags);
      row.generated = generate(lm, batch.prompt_ids, batch.injections, decode, max_new,
                               seed + 0x9e3779b97f4a7c15ull * idx, mode);
    } catch (const std::exception& e) {
      row.generated.clear();
      row.error = e.what();
    }
    result.rows[idx] = std::move(row);
  };

  if (n_jobs <= 1 || samples.size() <= 1) {
    for (std::size_t i = 0; i < samples.size(); ++i) run_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t i = next.fetch_add(1); i < samples.size(); i = next.fetch_add(1))
        run_one(i);
    };
    std::vector<std::thread> pool;
    int n = std::min<int>(n_jobs, static_cast<int>(samples.size()));
    pool.reserve(static_cast<std::size_t>(n));
    for (int t = 0; t < n; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  return result;
}

void write_loss_trace(const std::string& path, const std::vector<LossTraceRow>& trace) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << "sample_index,loss,atl\n";
  out << std::setprecision(17);
  for (const LossTraceRow& row : trace)
    out << row.sample_index << "," << row.loss << "," << row.atl << "\n";
  if (!out) throw DataError("write failed: " + path);
}

void save_embeddings(const std::string& path, const EmbeddingTable& table) {
  BinWriter w(path);
  w.u64(kEmbedMagic);
  w.u64(kEmbedVersion);
  w.mat(table.user_vectors);
  w.mat(table.item_vectors);
  w.close();
}

EmbeddingTable load_embeddings(const std::string& path) {
  BinReader r(path);
  r.expect_magic(kEmbedMagic, kEmbedVersion, "embedding-table");
  EmbeddingTable t;
  t.user_vectors = r.mat();
  t.item_vectors = r.mat();
  return t;
}

}  // namespace xrec
