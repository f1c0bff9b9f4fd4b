#pragma once

#include "xrec/graph.hpp"

#include <optional>
#include <string>
#include <vector>

namespace xrec {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct WorldConfig {
  int num_users = 200;
  int num_items = 200;
  int num_topics = 8;
  int interactions_per_user = 15;
  std::vector<std::vector<std::string>> topic_vocab;  // default pools when empty
  unsigned long long seed = 7;
  double train_fraction = 0.8;
  double valid_fraction = 0.1;
  double test_fraction = 0.1;
};

struct ExplanationSample {
  int uid = 0;
  int iid = 0;
  std::string explanation;
  std::string split;  // train | valid | test
};

struct UserProfile {
  int uid = 0;
  std::string profile;
};

struct ItemProfile {
  int iid = 0;
  std::string title;
  std::string description;
};

struct Profiles {
  std::vector<UserProfile> users;
  std::vector<ItemProfile> items;

  const UserProfile* find_user(int uid) const;
  const ItemProfile* find_item(int iid) const;
};

struct World {
  InteractionGraph graph;  // all sampled interactions
  Profiles profiles;
  std::vector<ExplanationSample> samples;
  std::vector<int> user_topics;  // primary topic per user (for diagnostics)
  std::vector<int> item_topics;
};

/// Eight built-in topic word pools (12 words each, all alphabetic so no
/// generated text can trip the numeric-anomaly detector).
const std::vector<std::vector<std::string>>& default_topic_vocab();

/// Draws latent topic mixtures per user and item, samples interactions with
/// probability proportional to mixture affinity, and renders profiles and
/// ground-truth explanations from fixed templates.  Deterministic per seed;
/// explanations are distinct across (user, item) pairs by construction.
World generate_world(const WorldConfig& config);

/// JSON Lines dataset directory: samples.jsonl, user_profiles.jsonl,
/// item_profiles.jsonl.
void write_dataset(const std::string& dir, const std::vector<ExplanationSample>& samples,
                   const Profiles& profiles);
std::pair<std::vector<ExplanationSample>, Profiles> load_dataset(const std::string& dir);

/// Generated-output rows: {"uid","iid","generated"} plus an optional
/// "error" marker for samples that failed.
struct GeneratedRow {
  int uid = 0;
  int iid = 0;
  std::string generated;
  std::optional<std::string> error;
};

void write_generated(const std::string& path, const std::vector<GeneratedRow>& rows);
std::vector<GeneratedRow> load_generated(const std::string& path);

}  // namespace xrec
