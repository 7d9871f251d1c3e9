#pragma once

// Categorical Bias score, the two-group special case, target profiles and
// Jensen-Shannon divergence between profiles.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cbscore/prob.hpp"

namespace cbscore {

/// Population variance (divides by the number of values).
inline double cell_variance(std::span<const double> values) {
  if (values.size() < 2) throw PreconditionError("variance needs at least 2 values");
  double sum = 0.0;
  for (const double v : values) {
    if (!std::isfinite(v)) throw PreconditionError("variance input is not finite");
    sum += v;
  }
  const double mean = sum / static_cast<double>(values.size());
  double ss = 0.0;
  for (const double v : values) ss += (v - mean) * (v - mean);
  return ss / static_cast<double>(values.size());
}

/// Difference of two groups' log normalized probabilities. For two groups,
/// cell_variance({a, b}) == (two_group_bias(a, b) / 2)^2.
inline double two_group_bias(double logp_a, double logp_b) { return logp_a - logp_b; }

struct CBReport {
  double cb_score = 0.0;
  /// [template][attribute]
  std::vector<std::vector<double>> per_cell_variance;
  std::vector<double> per_template_mean;
  std::vector<double> per_attribute_mean;
  std::size_t num_templates = 0;
  std::size_t num_attributes = 0;
  std::size_t num_targets = 0;
};

struct RankedCell {
  std::size_t template_index;
  std::size_t attribute_index;
  double variance;
};

inline CBReport cb_score(const ProbTable& table) {
  table.validate();
  const auto m = table.num_templates();
  const auto o = table.num_attributes();
  CBReport r;
  r.num_templates = m;
  r.num_attributes = o;
  r.num_targets = table.num_targets();
  r.per_cell_variance.assign(m, std::vector<double>(o, 0.0));
  r.per_template_mean.assign(m, 0.0);
  r.per_attribute_mean.assign(o, 0.0);

  std::vector<double> logs(table.num_targets());
  double total = 0.0;
  for (std::size_t t = 0; t < m; ++t) {
    for (std::size_t a = 0; a < o; ++a) {
      const auto row = table.row(t, a);
      std::transform(row.begin(), row.end(), logs.begin(), [](const ProbCell& c) { return c.log_normalized; });
      const double v = cell_variance(logs);
      r.per_cell_variance[t][a] = v;
      r.per_template_mean[t] += v / static_cast<double>(o);
      r.per_attribute_mean[a] += v / static_cast<double>(m);
      total += v;
    }
  }
  r.cb_score = total / static_cast<double>(m * o);
  return r;
}

/// Cells sorted by descending variance, ties broken by index; at most `k`.
inline std::vector<RankedCell> top_cells(const CBReport& report, std::size_t k) {
  std::vector<RankedCell> all;
  for (std::size_t t = 0; t < report.num_templates; ++t) {
    for (std::size_t a = 0; a < report.num_attributes; ++a) all.push_back({t, a, report.per_cell_variance[t][a]});
  }
  std::stable_sort(all.begin(), all.end(), [](const auto& x, const auto& y) { return x.variance > y.variance; });
  if (all.size() > k) all.resize(k);
  return all;
}

// Profiles -------------------------------------------------------------------

struct ProfileContext {
  std::size_t template_id;
  std::string attribute;
};

/// A distribution over an ordered target list. `context` is empty for a
/// pooled profile.
struct Profile {
  std::vector<std::string> targets;
  std::vector<double> weights;
  std::optional<ProfileContext> context;
};

inline constexpr double kSimplexTolerance = 1e-9;

inline void validate_profile(const Profile& p) {
  if (p.weights.size() != p.targets.size() || p.weights.empty()) throw ValidationError("profile size mismatch");
  double s = 0.0;
  for (const double w : p.weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ValidationError("profile weight is negative or not finite");
    s += w;
  }
  if (std::abs(s - 1.0) > kSimplexTolerance) throw ValidationError("profile does not sum to 1");
}

/// Normalized probabilities of one cell row scaled to sum to 1.
inline Profile profile(const ProbTable& table, std::size_t template_index, std::size_t attribute_index) {
  const auto row = table.row(template_index, attribute_index);
  Profile p;
  p.targets = table.targets;
  p.context = ProfileContext{table.templates.at(template_index).id, table.attributes.at(attribute_index)};
  double sum = 0.0;
  for (const auto& c : row) {
    if (!(c.p_normalized > 0.0)) throw PreconditionError("profile needs positive normalized probabilities");
    sum += c.p_normalized;
  }
  for (const auto& c : row) p.weights.push_back(c.p_normalized / sum);
  return p;
}

/// Mean of all per-cell profiles.
inline Profile pooled_profile(const ProbTable& table) {
  table.validate();
  Profile out;
  out.targets = table.targets;
  out.weights.assign(table.num_targets(), 0.0);
  const double cells = static_cast<double>(table.num_templates() * table.num_attributes());
  for (std::size_t t = 0; t < table.num_templates(); ++t) {
    for (std::size_t a = 0; a < table.num_attributes(); ++a) {
      const auto p = profile(table, t, a);
      for (std::size_t n = 0; n < p.weights.size(); ++n) out.weights[n] += p.weights[n] / cells;
    }
  }
  return out;
}

// Jensen-Shannon divergence --------------------------------------------------

enum class TargetMatching {
  /// Target lists must be identical, in order.
  ByName,
  /// Only sizes must agree; entries are paired by index (translated packs).
  ByPosition,
};

/// Natural-log Jensen-Shannon divergence; 0 * ln(0 / x) counts as 0.
/// Result lies in [0, ln 2].
inline double jsd(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size() || p.empty()) throw ValidationError("jsd over distributions of different sizes");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double mi = 0.5 * (p[i] + q[i]);
    double term = 0.0;
    if (p[i] > 0.0) term += p[i] * std::log(p[i] / mi);
    if (q[i] > 0.0) term += q[i] * std::log(q[i] / mi);
    acc += term;
  }
  return std::max(0.0, 0.5 * acc);
}

inline double jsd(const Profile& p, const Profile& q, TargetMatching matching = TargetMatching::ByName) {
  if (matching == TargetMatching::ByName && p.targets != q.targets) {
    throw ValidationError("profiles are over different target lists");
  }
  return jsd(std::span<const double>(p.weights), std::span<const double>(q.weights));
}

inline void check_same_grid(const ProbTable& a, const ProbTable& b, TargetMatching matching) {
  if (a.num_targets() != b.num_targets()) {
    throw ValidationError("tables have " + std::to_string(a.num_targets()) + " and " +
                          std::to_string(b.num_targets()) + " targets");
  }
  if (a.num_templates() != b.num_templates() || a.num_attributes() != b.num_attributes()) {
    throw ValidationError("tables have different template x attribute grids");
  }
  if (matching == TargetMatching::ByPosition) return;
  for (std::size_t n = 0; n < a.num_targets(); ++n) {
    if (a.targets[n] != b.targets[n]) {
      throw ValidationError("target order differs at position " + std::to_string(n) + ": '" + a.targets[n] +
                            "' vs '" + b.targets[n] + "'");
    }
  }
  if (a.attributes != b.attributes) throw ValidationError("tables have different attribute lists");
  for (std::size_t t = 0; t < a.num_templates(); ++t) {
    if (a.templates[t].id != b.templates[t].id) throw ValidationError("tables have different template ids");
  }
}

/// Entry (i, j) is the mean over (template, attribute) cells of the JSD
/// between table i's and table j's cell profiles.
inline std::vector<std::vector<double>> jsd_matrix(std::span<const ProbTable> tables,
                                                   TargetMatching matching = TargetMatching::ByName) {
  if (tables.size() < 2) throw PreconditionError("jsd_matrix needs at least 2 tables");
  for (const auto& t : tables) t.validate();
  for (std::size_t i = 1; i < tables.size(); ++i) check_same_grid(tables[0], tables[i], matching);

  const auto k = tables.size();
  const auto m = tables[0].num_templates();
  const auto o = tables[0].num_attributes();
  std::vector<std::vector<Profile>> profiles(k);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t t = 0; t < m; ++t) {
      for (std::size_t a = 0; a < o; ++a) profiles[i].push_back(profile(tables[i], t, a));
    }
  }
  std::vector<std::vector<double>> out(k, std::vector<double>(k, 0.0));
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = i + 1; j < k; ++j) {
      double sum = 0.0;
      for (std::size_t c = 0; c < profiles[i].size(); ++c) {
        sum += jsd(profiles[i][c], profiles[j][c], TargetMatching::ByPosition);
      }
      out[i][j] = out[j][i] = sum / static_cast<double>(profiles[i].size());
    }
  }
  return out;
}

// Serialization --------------------------------------------------------------

inline nlohmann::json to_json(const CBReport& r, const ProbTable& table) {
  nlohmann::json cells = nlohmann::json::array();
  for (std::size_t t = 0; t < r.num_templates; ++t) {
    for (std::size_t a = 0; a < r.num_attributes; ++a) {
      cells.push_back({{"template_id", table.templates[t].id},
                       {"attribute", table.attributes[a]},
                       {"variance", r.per_cell_variance[t][a]}});
    }
  }
  nlohmann::json per_template = nlohmann::json::array();
  for (std::size_t t = 0; t < r.num_templates; ++t) {
    per_template.push_back({{"template_id", table.templates[t].id}, {"mean_variance", r.per_template_mean[t]}});
  }
  nlohmann::json per_attribute = nlohmann::json::array();
  for (std::size_t a = 0; a < r.num_attributes; ++a) {
    per_attribute.push_back({{"attribute", table.attributes[a]}, {"mean_variance", r.per_attribute_mean[a]}});
  }
  return {{"cb_score", r.cb_score},
          {"counts", {{"templates", r.num_templates}, {"attributes", r.num_attributes}, {"targets", r.num_targets}}},
          {"per_cell_variance", cells},
          {"per_template_mean", per_template},
          {"per_attribute_mean", per_attribute}};
}

inline std::string variance_csv(const CBReport& r, const ProbTable& table) {
  std::string out = "template_id,attribute,variance\n";
  for (std::size_t t = 0; t < r.num_templates; ++t) {
    for (std::size_t a = 0; a < r.num_attributes; ++a) {
      out += std::to_string(table.templates[t].id) + ',' + detail::csv_field(table.attributes[a]) + ',' +
             detail::format_double(r.per_cell_variance[t][a]) + '\n';
    }
  }
  return out;
}

}  // namespace cbscore
