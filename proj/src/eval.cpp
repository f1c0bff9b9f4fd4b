#include "xrec/eval.hpp"

#include "xrec/emissions.hpp"
#include "xrec/vocab.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_map>
#include <unordered_set>

namespace xrec {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

}  // namespace

double usr(const std::vector<std::string>& explanations) {
  if (explanations.empty()) throw EvalError("usr: empty explanation list");
  std::unordered_set<std::string> unique;
  for (const std::string& s : explanations) unique.insert(trim(s));
  return static_cast<double>(unique.size()) / static_cast<double>(explanations.size());
}

// --------------------------------------------------------------------------
// Token similarity
// --------------------------------------------------------------------------

namespace {

double cosine(const Mat& a, long i, const Mat& b, long j) {
  double na = a.row(i).norm();
  double nb = b.row(j).norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.row(i).dot(b.row(j)) / (na * nb);
}

double greedy_side(const Mat& from, const Mat& against) {
  double total = 0.0;
  for (long i = 0; i < from.rows(); ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (long j = 0; j < against.rows(); ++j) best = std::max(best, cosine(from, i, against, j));
    total += best;
  }
  return total / static_cast<double>(from.rows());
}

}  // namespace

EmbedScores embed_sim_score(const std::string& candidate, const std::string& reference,
                            const Embedder& embedder) {
  Mat c = embedder.embed(candidate);
  Mat r = embedder.embed(reference);
  if (c.rows() == 0) throw EvalError("embed_sim_score: candidate is empty after tokenization");
  if (r.rows() == 0) throw EvalError("embed_sim_score: reference is empty after tokenization");
  EmbedScores s;
  s.precision = greedy_side(c, r);
  s.recall = greedy_side(r, c);
  s.f1 = (s.precision + s.recall == 0.0)
             ? 0.0
             : 2.0 * s.precision * s.recall / (s.precision + s.recall);
  return s;
}

// --------------------------------------------------------------------------
// Regeneration likelihood
// --------------------------------------------------------------------------

double likelihood_score(const std::string& candidate, const std::string& reference,
                        const ToyLm& lm) {
  std::vector<int> prompt_ids;
  prompt_ids.push_back(Vocab::kBos);
  for (int id : tokenize(candidate, lm.vocab)) prompt_ids.push_back(id);
  std::vector<int> target_ids = tokenize(reference, lm.vocab);
  if (target_ids.empty())
    throw EvalError("likelihood_score: reference is empty after tokenization");
  InjectionMap none;
  return -nll_on_target_value(lm, prompt_ids, none, target_ids, InjectMode::kReplaceEveryLayer);
}

// --------------------------------------------------------------------------
// Judge stub (the live client lives in judge.cpp)
// --------------------------------------------------------------------------

int judge_score_stub(const std::string& candidate, const std::string& reference) {
  std::vector<std::string> ct = word_split(candidate);
  std::vector<std::string> rt = word_split(reference);
  std::set<std::string> cs(ct.begin(), ct.end());
  std::set<std::string> rs(rt.begin(), rt.end());
  if (cs.empty() && rs.empty()) return 100;
  if (cs.empty() || rs.empty()) return 0;
  long overlap = 0;
  for (const std::string& t : cs) overlap += rs.count(t) ? 1 : 0;
  double p = static_cast<double>(overlap) / static_cast<double>(cs.size());
  double r = static_cast<double>(overlap) / static_cast<double>(rs.size());
  double f1 = (p + r == 0.0) ? 0.0 : 2.0 * p * r / (p + r);
  return static_cast<int>(std::lround(100.0 * f1));
}

// --------------------------------------------------------------------------
// Numeric anomaly
// --------------------------------------------------------------------------

bool detect_numeric_anomaly(const std::string& explanation) {
  long non_ws = 0;
  long digits = 0;
  long run = 0;
  long best_run = 0;
  for (char ch : explanation) {
    unsigned char c = static_cast<unsigned char>(ch);
    if (!std::isspace(c)) {
      ++non_ws;
      if (std::isdigit(c)) ++digits;
    }
    if (std::isdigit(c) || ch == '/') {
      ++run;
      best_run = std::max(best_run, run);
    } else {
      run = 0;
    }
  }
  if (best_run >= 12) return true;
  if (non_ws == 0) return false;
  return static_cast<double>(digits) / static_cast<double>(non_ws) >= 0.30;
}

// --------------------------------------------------------------------------
// Aggregation
// --------------------------------------------------------------------------

MetricReport aggregate(const std::vector<MetricRow>& rows) {
  if (rows.empty()) throw EvalError("aggregate: no usable metric rows");
  MetricReport report;
  report.rows = rows;
  std::map<std::string, std::vector<double>> by_metric;
  for (const MetricRow& row : rows) by_metric[row.metric].push_back(row.value);
  for (const auto& [metric, values] : by_metric) {
    double n = static_cast<double>(values.size());
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : values) var += (v - mean) * (v - mean);
    var /= n;  // population variance
    report.stats[metric] = MetricStats{mean, std::sqrt(var), static_cast<long>(values.size())};
  }
  return report;
}

// --------------------------------------------------------------------------
// Report rendering
// --------------------------------------------------------------------------

namespace {

std::string fmt(double v) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4) << v;
  return out.str();
}

// Preferred column order; metrics outside this list follow alphabetically.
const std::vector<std::string> kMetricOrder = {"judge", "embed_p", "embed_r", "embed_f1",
                                               "likelihood"};

std::vector<std::string> ordered_metrics(const std::vector<MetricReport>& reports) {
  std::set<std::string> seen;
  for (const MetricReport& r : reports)
    for (const auto& [name, stats] : r.stats) seen.insert(name);
  std::vector<std::string> order;
  for (const std::string& name : kMetricOrder)
    if (seen.erase(name)) order.push_back(name);
  order.insert(order.end(), seen.begin(), seen.end());
  return order;
}

/// Index of the best value, or -1 when no values are present.
long best_index(const std::vector<std::optional<double>>& column, bool higher_is_better) {
  long best = -1;
  for (std::size_t i = 0; i < column.size(); ++i) {
    if (!column[i]) continue;
    if (best < 0 || (higher_is_better ? *column[i] > *column[best]
                                      : *column[i] < *column[best]))
      best = static_cast<long>(i);
  }
  return best;
}

}  // namespace

std::string render_report(const std::vector<MetricReport>& reports,
                          const std::map<std::string, ExternalScore>& external) {
  if (reports.empty()) throw EvalError("render_report: no reports");
  std::vector<std::string> metrics = ordered_metrics(reports);

  // Column layout: variant | (mean, std) per metric | optional external | usr.
  struct Column {
    std::string header;
    bool higher_is_better;
    std::vector<std::optional<double>> values;
  };
  std::vector<Column> columns;
  for (const std::string& m : metrics) {
    columns.push_back({m + " mean", true, {}});
    columns.push_back({m + " std", false, {}});
  }
  if (!external.empty()) {
    columns.push_back({"external mean", true, {}});
    columns.push_back({"external std", false, {}});
  }
  columns.push_back({"usr", true, {}});

  for (const MetricReport& r : reports) {
    std::size_t col = 0;
    for (const std::string& m : metrics) {
      auto it = r.stats.find(m);
      columns[col++].values.push_back(it == r.stats.end()
                                          ? std::nullopt
                                          : std::optional<double>(it->second.mean));
      columns[col++].values.push_back(it == r.stats.end()
                                          ? std::nullopt
                                          : std::optional<double>(it->second.stddev));
    }
    if (!external.empty()) {
      auto it = external.find(r.variant);
      columns[col++].values.push_back(it == external.end()
                                          ? std::nullopt
                                          : std::optional<double>(it->second.mean));
      columns[col++].values.push_back(it == external.end()
                                          ? std::nullopt
                                          : std::optional<double>(it->second.stddev));
    }
    columns[col].values.push_back(r.usr);
  }

  std::vector<long> best(columns.size());
  for (std::size_t c = 0; c < columns.size(); ++c)
    best[c] = best_index(columns[c].values, columns[c].higher_is_better);

  std::ostringstream out;
  out << "# Evaluation report\n\n";
  out << "| variant |";
  for (const Column& c : columns) out << " " << c.header << " |";
  out << "\n|---|";
  for (std::size_t c = 0; c < columns.size(); ++c) out << "---|";
  out << "\n";
  for (std::size_t i = 0; i < reports.size(); ++i) {
    out << "| " << reports[i].variant << " |";
    for (std::size_t c = 0; c < columns.size(); ++c) {
      const auto& v = columns[c].values[i];
      if (!v) {
        out << " - |";
      } else if (best[c] == static_cast<long>(i)) {
        out << " **" << fmt(*v) << "** |";
      } else {
        out << " " << fmt(*v) << " |";
      }
    }
    out << "\n";
  }
  out << "\n";

  for (const MetricReport& r : reports) {
    for (const auto& [metric, count] : r.excluded)
      if (count > 0)
        out << "- " << r.variant << ": " << count << " " << metric
            << " row(s) excluded (score unavailable, not zero).\n";
    if (r.anomaly_count > 0)
      out << "- " << r.variant << ": " << r.anomaly_count
          << " generated explanation(s) flagged as numeric anomalies.\n";
  }

  out << "\nToken-similarity scores use this pipeline's own frozen language model as the "
         "contextual embedder; they are comparable across rows of this table but not against "
         "scores computed with any other embedder.\n";
  out << "\n" << kEmissionsNote << "\n";
  return out.str();
}

// --------------------------------------------------------------------------
// rows.csv
// --------------------------------------------------------------------------

void write_rows_csv(const std::string& path, const std::vector<MetricRow>& rows) {
  std::ofstream out(path);
  if (!out) throw EvalError("cannot write " + path);
  out << "sample_id,metric,value\n";
  out << std::setprecision(17);
  for (const MetricRow& row : rows)
    out << row.sample_id << "," << row.metric << "," << row.value << "\n";
  if (!out) throw EvalError("write failed: " + path);
}

std::vector<MetricRow> read_rows_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw EvalError("cannot read " + path);
  std::vector<MetricRow> rows;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 || line.empty()) continue;  // header
    std::istringstream ss(line);
    std::string id_s, metric, value_s;
    if (!std::getline(ss, id_s, ',') || !std::getline(ss, metric, ',') ||
        !std::getline(ss, value_s))
      throw EvalError(path + ":" + std::to_string(line_no) + ": malformed row");
    try {
      rows.push_back(MetricRow{std::stol(id_s), metric, std::stod(value_s)});
    } catch (const std::exception&) {
      throw EvalError(path + ":" + std::to_string(line_no) + ": malformed row");
    }
  }
  return rows;
}

// --------------------------------------------------------------------------
// Driver
// --------------------------------------------------------------------------

JoinResult join_generated(const std::vector<GeneratedRow>& generated,
                          const std::vector<ExplanationSample>& truth) {
  std::unordered_map<long long, const ExplanationSample*> by_key;
  for (const ExplanationSample& s : truth)
    by_key[(static_cast<long long>(s.uid) << 32) | static_cast<unsigned>(s.iid)] = &s;
  JoinResult result;
  long next_id = 0;
  for (const GeneratedRow& row : generated) {
    if (row.error || trim(row.generated).empty()) {
      ++result.skipped;
      continue;
    }
    auto it = by_key.find((static_cast<long long>(row.uid) << 32) | static_cast<unsigned>(row.iid));
    if (it == by_key.end()) {
      ++result.skipped;
      continue;
    }
    result.pairs.push_back(
        EvalPair{next_id++, row.uid, row.iid, row.generated, it->second->explanation});
  }
  return result;
}

MetricReport evaluate_pairs(const std::vector<EvalPair>& pairs, const ToyLm& lm,
                            const EvalOptions& options) {
  if (pairs.empty()) throw EvalError("evaluate_pairs: no candidate/reference pairs");
  LmEmbedder embedder(lm);

  std::vector<MetricRow> rows;
  long anomalies = 0;
  std::vector<std::string> candidates;
  candidates.reserve(pairs.size());
  std::map<std::string, long> excluded;

  for (const EvalPair& pair : pairs) {
    candidates.push_back(pair.candidate);
    if (detect_numeric_anomaly(pair.candidate)) ++anomalies;
    EmbedScores es = embed_sim_score(pair.candidate, pair.reference, embedder);
    rows.push_back(MetricRow{pair.sample_id, "embed_p", es.precision});
    rows.push_back(MetricRow{pair.sample_id, "embed_r", es.recall});
    rows.push_back(MetricRow{pair.sample_id, "embed_f1", es.f1});
    rows.push_back(MetricRow{pair.sample_id, "likelihood",
                             likelihood_score(pair.candidate, pair.reference, lm)});
  }

  if (options.with_judge) {
    // Judge scores arrive over the network in live mode; bounded workers keep
    // at most `concurrency` requests in flight. Failed rows stay missing.
    std::vector<std::optional<int>> scores(pairs.size());
    int workers = options.judge.stub_mode ? 1 : std::max(1, options.judge.concurrency);
    std::atomic<std::size_t> next{0};
    std::atomic<long> failures{0};
    auto work = [&] {
      for (std::size_t i = next.fetch_add(1); i < pairs.size(); i = next.fetch_add(1)) {
        try {
          scores[i] = judge_score(pairs[i].candidate, pairs[i].reference, options.judge);
        } catch (const EvalError&) {
          failures.fetch_add(1);
        }
      }
    };
    if (workers <= 1) {
      work();
    } else {
      std::vector<std::thread> pool;
      for (int t = 0; t < workers; ++t) pool.emplace_back(work);
      for (std::thread& t : pool) t.join();
    }
    for (std::size_t i = 0; i < pairs.size(); ++i)
      if (scores[i])
        rows.push_back(MetricRow{pairs[i].sample_id, "judge", static_cast<double>(*scores[i])});
    if (failures.load() > 0) excluded["judge"] = failures.load();
  }

  MetricReport report = aggregate(rows);
  report.variant = options.variant;
  report.usr = usr(candidates);
  report.anomaly_count = anomalies;
  report.excluded = excluded;
  return report;
}

}  // namespace xrec
