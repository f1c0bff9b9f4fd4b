#include "xrec/datagen.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace xrec {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::vector<std::string>>& default_topic_vocab() {
  static const std::vector<std::vector<std::string>> pools = {
      {"trail", "ridge", "summit", "forest", "river", "canyon", "meadow", "cliff", "glacier",
       "valley", "creek", "pine"},
      {"saffron", "basil", "simmer", "roast", "dough", "sourdough", "spice", "broth", "skillet",
       "glaze", "harvest", "feast"},
      {"melody", "rhythm", "chord", "sonata", "tempo", "ballad", "harmony", "verse", "chorus",
       "riff", "cadence", "encore"},
      {"orbit", "nebula", "comet", "eclipse", "galaxy", "lunar", "rover", "telescope", "cosmos",
       "asteroid", "station", "flare"},
      {"clue", "cipher", "alibi", "detective", "shadow", "motive", "suspect", "riddle", "vault",
       "heist", "witness", "dossier"},
      {"bloom", "orchid", "trellis", "compost", "seedling", "prune", "pollen", "fern", "petal",
       "nectar", "grove", "moss"},
      {"harbor", "tide", "mast", "lagoon", "compass", "reef", "anchor", "voyage", "galleon",
       "current", "lighthouse", "squall"},
      {"loom", "kiln", "chisel", "weave", "pottery", "varnish", "lathe", "stitch", "leather",
       "timber", "forge", "mosaic"},
  };
  return pools;
}

namespace {

const std::vector<std::string>& title_adjectives() {
  static const std::vector<std::string> v = {
      "azure",   "crimson", "silent",     "golden", "hidden",  "wandering", "emerald",
      "frozen",  "velvet",  "amber",      "restless", "pale",  "scarlet",   "quiet",
      "distant", "ivory",   "shimmering", "rusted", "gentle",  "midnight",  "hollow",
      "radiant", "weathered", "lonely"};
  return v;
}

const std::vector<std::string>& title_nouns() {
  static const std::vector<std::string> v = {
      "falcon",  "lantern", "compass", "garden", "voyage", "letter",    "mountain", "sparrow",
      "archive", "harbor",  "orchard", "mirror", "bridge", "meadow",    "signal",   "crown",
      "atlas",   "ember",   "fable",   "beacon", "thicket", "chronicle", "vestige",  "paradox"};
  return v;
}

const std::vector<std::string>& item_kinds() {
  static const std::vector<std::string> v = {"story", "guide", "journal", "collection"};
  return v;
}

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Deterministic pick of `count` distinct pool indices keyed on (a, b, salt).
std::vector<std::size_t> pick_distinct(std::size_t pool_size, int count, std::uint64_t a,
                                       std::uint64_t b, std::uint64_t salt) {
  std::vector<std::size_t> out;
  std::uint64_t probe = 0;
  while (static_cast<int>(out.size()) < count) {
    std::uint64_t h = mix64(a * 1000003ull + b * 7919ull + salt * 31ull + probe);
    std::size_t idx = h % pool_size;
    if (std::find(out.begin(), out.end(), idx) == out.end()) out.push_back(idx);
    ++probe;
  }
  return out;
}

void check_config(const WorldConfig& c, const std::vector<std::vector<std::string>>& vocab) {
  if (c.num_users < 1 || c.num_items < 1 || c.num_topics < 1 ||
      c.interactions_per_user < 1)
    throw DataError("world config: counts must be positive");
  if (c.interactions_per_user > c.num_items)
    throw DataError("world config: requested interactions exceed num_users x num_items");
  double s = c.train_fraction + c.valid_fraction + c.test_fraction;
  if (std::abs(s - 1.0) > 1e-9)
    throw DataError("world config: split fractions must sum to 1");
  if (static_cast<int>(vocab.size()) < c.num_topics)
    throw DataError("world config: topic_vocab provides " + std::to_string(vocab.size()) +
                    " pools for " + std::to_string(c.num_topics) + " topics");
  for (const auto& pool : vocab)
    if (pool.size() < 3) throw DataError("world config: every topic needs >= 3 words");
  std::size_t title_space = title_adjectives().size() * title_nouns().size();
  if (static_cast<std::size_t>(c.num_items) > title_space)
    throw DataError("world config: num_items exceeds the distinct-title space");
}

}  // namespace

const UserProfile* Profiles::find_user(int uid) const {
  for (const UserProfile& u : users)
    if (u.uid == uid) return &u;
  return nullptr;
}

const ItemProfile* Profiles::find_item(int iid) const {
  for (const ItemProfile& i : items)
    if (i.iid == iid) return &i;
  return nullptr;
}

World generate_world(const WorldConfig& config) {
  const auto& vocab = config.topic_vocab.empty() ? default_topic_vocab() : config.topic_vocab;
  check_config(config, vocab);

  std::mt19937_64 rng(config.seed);
  std::uniform_int_distribution<int> topic_dist(0, config.num_topics - 1);

  // Latent topic mixtures: a dominant primary topic (weight 0.95) and a
  // faint secondary topic (weight 0.05) per node.  The sharp mixture keeps
  // the interaction graph topically clustered enough that collaborative
  // filtering can recover the structure from co-interactions alone.
  auto draw_topics = [&](int n, std::vector<int>& primary, std::vector<int>& secondary) {
    for (int j = 0; j < n; ++j) {
      int p = topic_dist(rng);
      int s = topic_dist(rng);
      while (config.num_topics > 1 && s == p) s = topic_dist(rng);
      primary.push_back(p);
      secondary.push_back(s);
    }
  };
  std::vector<int> u_primary, u_secondary, i_primary, i_secondary;
  draw_topics(config.num_users, u_primary, u_secondary);
  draw_topics(config.num_items, i_primary, i_secondary);

  auto affinity = [&](int u, int i) {
    double a = 0.01;  // base rate so every pair stays possible
    auto su = static_cast<std::size_t>(u);
    auto si = static_cast<std::size_t>(i);
    if (u_primary[su] == i_primary[si]) a += 0.95 * 0.95;
    if (u_primary[su] == i_secondary[si]) a += 0.95 * 0.05;
    if (u_secondary[su] == i_primary[si]) a += 0.05 * 0.95;
    if (u_secondary[su] == i_secondary[si]) a += 0.05 * 0.05;
    return a;
  };

  // Interactions: weighted sampling without replacement per user.
  std::vector<std::pair<int, int>> edges;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int u = 0; u < config.num_users; ++u) {
    std::vector<double> w(static_cast<std::size_t>(config.num_items));
    double total = 0.0;
    for (int i = 0; i < config.num_items; ++i) {
      w[static_cast<std::size_t>(i)] = affinity(u, i);
      total += w[static_cast<std::size_t>(i)];
    }
    for (int t = 0; t < config.interactions_per_user; ++t) {
      double r = unit(rng) * total;
      double acc = 0.0;
      int pick = config.num_items - 1;
      for (int i = 0; i < config.num_items; ++i) {
        double wi = w[static_cast<std::size_t>(i)];
        if (wi <= 0.0) continue;
        acc += wi;
        if (r <= acc) {
          pick = i;
          break;
        }
      }
      edges.emplace_back(u, pick);
      total -= w[static_cast<std::size_t>(pick)];
      w[static_cast<std::size_t>(pick)] = 0.0;
    }
  }

  World world;
  world.graph = InteractionGraph::build(config.num_users, config.num_items, edges);
  world.user_topics = u_primary;
  world.item_topics = i_primary;

  // User profiles: three primary-topic words plus one secondary-topic word,
  // distinct across users by construction.
  std::set<std::string> seen_profiles;
  for (int u = 0; u < config.num_users; ++u) {
    const auto& pp = vocab[static_cast<std::size_t>(u_primary[static_cast<std::size_t>(u)])];
    const auto& sp = vocab[static_cast<std::size_t>(u_secondary[static_cast<std::size_t>(u)])];
    std::string text;
    for (std::uint64_t salt = 0;; ++salt) {
      auto wi = pick_distinct(pp.size(), 3, static_cast<std::uint64_t>(u) + 11ull, 101ull, salt);
      auto si = pick_distinct(sp.size(), 1, static_cast<std::uint64_t>(u) + 11ull, 211ull, salt);
      text = "interested in " + pp[wi[0]] + " " + pp[wi[1]] + " " + pp[wi[2]] + " and " +
             sp[si[0]];
      if (seen_profiles.insert(text).second) break;
    }
    world.profiles.users.push_back(UserProfile{u, text});
  }

  // Item profiles: distinct two-word titles plus a templated description.
  std::vector<std::size_t> title_order(title_adjectives().size() * title_nouns().size());
  std::iota(title_order.begin(), title_order.end(), 0);
  std::shuffle(title_order.begin(), title_order.end(), rng);
  for (int i = 0; i < config.num_items; ++i) {
    std::size_t t = title_order[static_cast<std::size_t>(i)];
    std::string title = "the " + title_adjectives()[t / title_nouns().size()] + " " +
                        title_nouns()[t % title_nouns().size()];
    const auto& pp = vocab[static_cast<std::size_t>(i_primary[static_cast<std::size_t>(i)])];
    const auto& sp = vocab[static_cast<std::size_t>(i_secondary[static_cast<std::size_t>(i)])];
    auto wi = pick_distinct(pp.size(), 2, static_cast<std::uint64_t>(i) + 17ull, 307ull, 0);
    auto si = pick_distinct(sp.size(), 1, static_cast<std::uint64_t>(i) + 17ull, 401ull, 0);
    std::string kind =
        item_kinds()[mix64(static_cast<std::uint64_t>(i) + 23ull) % item_kinds().size()];
    std::string desc =
        "a " + kind + " about " + pp[wi[0]] + " " + pp[wi[1]] + " and " + sp[si[0]];
    world.profiles.items.push_back(ItemProfile{i, title, desc});
  }

  // Ground-truth explanations: user-topic words keyed by the user alone and
  // item-topic words keyed by the item alone, so a node's words are stable
  // across all of its pairs and learnable from training interactions -- the
  // collaborative identity signal genuinely predicts part of the target
  // text.  Distinctness is enforced with a salt loop.
  std::set<std::string> seen_expl;
  std::vector<ExplanationSample> samples;
  for (const auto& [u, i] : world.graph.edges) {
    const auto& up = vocab[static_cast<std::size_t>(u_primary[static_cast<std::size_t>(u)])];
    const auto& ip = vocab[static_cast<std::size_t>(i_primary[static_cast<std::size_t>(i)])];
    const std::string& title = world.profiles.items[static_cast<std::size_t>(i)].title;
    std::string text;
    for (std::uint64_t salt = 0;; ++salt) {
      auto uw = pick_distinct(up.size(), 2, static_cast<std::uint64_t>(u) + 31ull, 47ull, salt);
      auto iw = pick_distinct(ip.size(), 2, 53ull, static_cast<std::uint64_t>(i) + 59ull, salt);
      text = "the user would enjoy " + title + " because they value " + up[uw[0]] + " and " +
             up[uw[1]] + " and it offers " + ip[iw[0]] + " and " + ip[iw[1]];
      if (seen_expl.insert(text).second) break;
    }
    samples.push_back(ExplanationSample{u, i, text, ""});
  }

  // Split assignment over a shuffled order.
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n = samples.size();
  auto n_train = static_cast<std::size_t>(std::floor(config.train_fraction * static_cast<double>(n)));
  auto n_valid = static_cast<std::size_t>(std::floor(config.valid_fraction * static_cast<double>(n)));
  for (std::size_t r = 0; r < n; ++r) {
    std::string split = r < n_train ? "train" : (r < n_train + n_valid ? "valid" : "test");
    samples[order[r]].split = split;
  }

  // Emit in shuffled order so downstream single-pass training sees a mixed
  // stream rather than per-user runs.
  world.samples.reserve(n);
  for (std::size_t r = 0; r < n; ++r) world.samples.push_back(samples[order[r]]);
  return world;
}

namespace {

json parse_line(const std::string& file, std::size_t line_no, const std::string& line) {
  try {
    return json::parse(line);
  } catch (const json::exception& e) {
    throw DataError(file + " line " + std::to_string(line_no) + ": malformed JSON: " + e.what());
  }
}

const json& need_field(const json& obj, const char* field, const std::string& file,
                       std::size_t line_no) {
  auto it = obj.find(field);
  if (it == obj.end())
    throw DataError(file + " line " + std::to_string(line_no) + ": missing field \"" + field +
                    "\"");
  return *it;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(line);
  return lines;
}

void write_lines(const std::string& path, const std::vector<json>& rows) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  for (const json& row : rows) out << row.dump() << "\n";
  if (!out) throw DataError("write failed: " + path);
}

}  // namespace

void write_dataset(const std::string& dir, const std::vector<ExplanationSample>& samples,
                   const Profiles& profiles) {
  fs::create_directories(dir);
  std::vector<json> rows;
  for (const ExplanationSample& s : samples)
    rows.push_back({{"uid", s.uid}, {"iid", s.iid}, {"explanation", s.explanation},
                    {"split", s.split}});
  write_lines((fs::path(dir) / "samples.jsonl").string(), rows);

  rows.clear();
  for (const UserProfile& u : profiles.users)
    rows.push_back({{"uid", u.uid}, {"profile", u.profile}});
  write_lines((fs::path(dir) / "user_profiles.jsonl").string(), rows);

  rows.clear();
  for (const ItemProfile& i : profiles.items)
    rows.push_back({{"iid", i.iid}, {"title", i.title}, {"description", i.description}});
  write_lines((fs::path(dir) / "item_profiles.jsonl").string(), rows);
}

std::pair<std::vector<ExplanationSample>, Profiles> load_dataset(const std::string& dir) {
  std::vector<ExplanationSample> samples;
  Profiles profiles;

  std::string f = (fs::path(dir) / "samples.jsonl").string();
  std::size_t line_no = 0;
  for (const std::string& line : read_lines(f)) {
    json obj = parse_line(f, ++line_no, line);
    ExplanationSample s;
    s.uid = need_field(obj, "uid", f, line_no).get<int>();
    s.iid = need_field(obj, "iid", f, line_no).get<int>();
    s.explanation = need_field(obj, "explanation", f, line_no).get<std::string>();
    s.split = need_field(obj, "split", f, line_no).get<std::string>();
    if (s.split != "train" && s.split != "valid" && s.split != "test")
      throw DataError(f + " line " + std::to_string(line_no) + ": unknown split \"" + s.split +
                      "\"");
    samples.push_back(std::move(s));
  }

  f = (fs::path(dir) / "user_profiles.jsonl").string();
  line_no = 0;
  for (const std::string& line : read_lines(f)) {
    json obj = parse_line(f, ++line_no, line);
    UserProfile u;
    u.uid = need_field(obj, "uid", f, line_no).get<int>();
    u.profile = need_field(obj, "profile", f, line_no).get<std::string>();
    profiles.users.push_back(std::move(u));
  }

  f = (fs::path(dir) / "item_profiles.jsonl").string();
  line_no = 0;
  for (const std::string& line : read_lines(f)) {
    json obj = parse_line(f, ++line_no, line);
    ItemProfile i;
    i.iid = need_field(obj, "iid", f, line_no).get<int>();
    i.title = need_field(obj, "title", f, line_no).get<std::string>();
    i.description = need_field(obj, "description", f, line_no).get<std::string>();
    profiles.items.push_back(std::move(i));
  }

  return {std::move(samples), std::move(profiles)};
}

void write_generated(const std::string& path, const std::vector<GeneratedRow>& rows) {
  std::vector<json> out;
  for (const GeneratedRow& r : rows) {
    json obj = {{"uid", r.uid}, {"iid", r.iid}, {"generated", r.generated}};
    if (r.error) obj["error"] = *r.error;
    out.push_back(std::move(obj));
  }
  write_lines(path, out);
}

std::vector<GeneratedRow> load_generated(const std::string& path) {
  std::vector<GeneratedRow> rows;
  std::size_t line_no = 0;
  for (const std::string& line : read_lines(path)) {
    json obj = parse_line(path, ++line_no, line);
    GeneratedRow r;
    r.uid = need_field(obj, "uid", path, line_no).get<int>();
    r.iid = need_field(obj, "iid", path, line_no).get<int>();
    r.generated = need_field(obj, "generated", path, line_no).get<std::string>();
    if (obj.contains("error")) r.error = obj["error"].get<std::string>();
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace xrec
