#pragma once

// Query construction, whole-word probabilities and normalized probabilities,
// and the sweep that fills a ProbTable over templates x attributes x targets.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "cbscore/backend.hpp"
#include "cbscore/lexicon.hpp"

namespace cbscore {

/// Lower bound applied to every whole-word probability before ratios/logs.
inline constexpr double kProbabilityFloor = 1e-12;

class UntokenizableError : public ValidationError {
 public:
  UntokenizableError(std::string word, const std::string& why)
      : ValidationError("target '" + word + "' is untokenizable: " + why), word_(std::move(word)) {}
  const std::string& word() const noexcept { return word_; }

 private:
  std::string word_;
};

/// A backend failure that aborted a sweep part-way.
class SweepError : public BackendError {
 public:
  SweepError(const std::string& cause, std::size_t done, std::size_t total)
      : BackendError("sweep aborted after " + std::to_string(done) + " of " + std::to_string(total) +
                     " cells: " + cause),
        completed_(done),
        total_(total) {}
  std::size_t completed_cells() const noexcept { return completed_; }
  std::size_t total_cells() const noexcept { return total_; }

 private:
  std::size_t completed_;
  std::size_t total_;
};

struct QueryPair {
  /// Attribute literal, target masked with W_t masks.
  MaskQuery target_query;
  /// Target masked with W_t masks, attribute masked with W_a masks.
  MaskQuery prior_query;
  TokenSpan target_span;
  /// Subword ids of each requested target, in candidate order.
  std::vector<std::vector<TokenId>> target_ids;
};

struct NormalizedProbability {
  double ratio;
  double log_ratio;
};

struct ProbCell {
  std::size_t template_id = 0;
  std::size_t attribute_index = 0;
  std::size_t target_index = 0;
  double p_tgt = 0.0;
  double p_prior = 0.0;
  double p_normalized = 0.0;
  double log_normalized = 0.0;
};

struct TableProvenance {
  std::string model_id;
  std::string language;
  std::string pack_hash;
  std::vector<std::string> excluded_targets;
};

/// Dense (templates x attributes x targets) grid of ProbCells.
struct ProbTable {
  std::vector<Template> templates;
  std::vector<std::string> attributes;
  std::vector<std::string> targets;
  std::vector<ProbCell> cells;
  TableProvenance provenance;

  std::size_t num_templates() const { return templates.size(); }
  std::size_t num_attributes() const { return attributes.size(); }
  std::size_t num_targets() const { return targets.size(); }

  std::size_t index(std::size_t t, std::size_t a, std::size_t n) const {
    return (t * attributes.size() + a) * targets.size() + n;
  }
  const ProbCell& at(std::size_t t, std::size_t a, std::size_t n) const { return cells.at(index(t, a, n)); }

  /// The |N| cells of one (template, attribute) pair.
  std::span<const ProbCell> row(std::size_t t, std::size_t a) const {
    return std::span<const ProbCell>(cells).subspan(index(t, a, 0), targets.size());
  }

  /// Throws ValidationError unless the grid is complete and every cell is
  /// where its indices say and carries consistent, finite values.
  void validate() const {
    if (templates.empty() || attributes.empty() || targets.size() < 2) {
      throw ValidationError("probability table needs >= 1 template, >= 1 attribute and >= 2 targets");
    }
    if (cells.size() != templates.size() * attributes.size() * targets.size()) {
      throw ValidationError("probability table is incomplete: " + std::to_string(cells.size()) + " cells for a " +
                            std::to_string(templates.size()) + "x" + std::to_string(attributes.size()) + "x" +
                            std::to_string(targets.size()) + " grid");
    }
    for (std::size_t t = 0; t < templates.size(); ++t) {
      for (std::size_t a = 0; a < attributes.size(); ++a) {
        for (std::size_t n = 0; n < targets.size(); ++n) {
          const auto& c = at(t, a, n);
          if (c.template_id != templates[t].id || c.attribute_index != a || c.target_index != n) {
            throw ValidationError("probability table cell out of place at (" + std::to_string(t) + ", " +
                                  std::to_string(a) + ", " + std::to_string(n) + ")");
          }
          if (!(c.p_normalized > 0.0) || !std::isfinite(c.log_normalized)) {
            throw ValidationError("non-finite normalized probability at (" + std::to_string(t) + ", " +
                                  std::to_string(a) + ", " + std::to_string(n) + ")");
          }
        }
      }
    }
  }
};

// Core arithmetic ------------------------------------------------------------

/// Product of per-position subword probabilities, floored at kProbabilityFloor.
/// Missing pairs are an error, never an implicit zero.
inline double word_probability(const MaskProbs& probs, TokenSpan span, std::span<const TokenId> subword_ids) {
  if (span.size() != subword_ids.size() || subword_ids.empty()) {
    throw PreconditionError("span length " + std::to_string(span.size()) + " does not match " +
                            std::to_string(subword_ids.size()) + " subword ids");
  }
  double p = 1.0;
  for (std::size_t i = 0; i < subword_ids.size(); ++i) p *= probs.at(span.begin + i, subword_ids[i]);
  return std::max(p, kProbabilityFloor);
}

inline NormalizedProbability normalized_probability(double p_tgt, double p_prior) {
  if (!(p_tgt > 0.0 && p_tgt <= 1.0) || !(p_prior > 0.0 && p_prior <= 1.0)) {
    throw PreconditionError("normalized_probability needs inputs in (0, 1]");
  }
  const double ratio = p_tgt / p_prior;
  return {ratio, std::log(ratio)};
}

// Query construction ---------------------------------------------------------

namespace detail {

/// A template pre-tokenized around its two slots.
struct TemplateLayout {
  struct Part {
    std::vector<TokenId> literal;
    std::optional<SlotRole> slot;
  };
  std::vector<Part> parts;
};

inline TemplateLayout layout_template(const Template& tpl, const MaskedLanguageModel& backend) {
  TemplateLayout out;
  for (const auto& seg : instantiate(tpl, kMask, kMask).segments) {
    if (const auto* text = std::get_if<std::string>(&seg)) {
      if (trim(*text).empty()) continue;
      out.parts.push_back({backend.tokenize(*text).ids, std::nullopt});
    } else {
      out.parts.push_back({{}, std::get<MaskedSpan>(seg).role});
    }
  }
  return out;
}

inline bool has_unk(const std::vector<TokenId>& ids, const BackendInfo& info) {
  return info.unk_token_id && std::find(ids.begin(), ids.end(), *info.unk_token_id) != ids.end();
}

inline std::vector<TokenId> tokenize_target(const std::string& target, const MaskedLanguageModel& backend) {
  if (trim(target).empty()) throw PreconditionError("target must not be empty");
  auto ids = backend.tokenize(target).ids;
  if (ids.empty()) throw UntokenizableError(target, "no subword tokens");
  if (has_unk(ids, backend.info())) throw UntokenizableError(target, "contains the unknown token");
  return ids;
}

/// Builds both queries for targets sharing one subword count.
inline QueryPair assemble_pair(const TemplateLayout& layout, const std::vector<std::vector<TokenId>>& targets,
                               const std::vector<TokenId>& attribute_ids) {
  const auto width = targets.front().size();
  QueryPair pair;
  pair.target_ids = targets;
  auto build = [&](bool mask_attribute) {
    MaskQuery q;
    for (const auto& part : layout.parts) {
      const auto begin = q.tokens.size();
      if (!part.slot) {
        q.tokens.insert(q.tokens.end(), part.literal.begin(), part.literal.end());
      } else if (*part.slot == SlotRole::Target) {
        q.tokens.insert(q.tokens.end(), width, std::nullopt);
        q.mask_spans[SlotRole::Target] = {begin, q.tokens.size()};
      } else if (mask_attribute) {
        q.tokens.insert(q.tokens.end(), attribute_ids.size(), std::nullopt);
        q.mask_spans[SlotRole::Attribute] = {begin, q.tokens.size()};
      } else {
        q.tokens.insert(q.tokens.end(), attribute_ids.begin(), attribute_ids.end());
      }
    }
    const auto span = q.mask_spans.at(SlotRole::Target);
    for (std::size_t k = 0; k < width; ++k) {
      CandidateList c{span.begin + k, {}};
      for (const auto& ids : targets) {
        if (std::find(c.token_ids.begin(), c.token_ids.end(), ids[k]) == c.token_ids.end()) c.token_ids.push_back(ids[k]);
      }
      q.candidates.push_back(std::move(c));
    }
    return q;
  };
  pair.target_query = build(false);
  pair.prior_query = build(true);
  pair.target_span = pair.target_query.mask_spans.at(SlotRole::Target);
  return pair;
}

}  // namespace detail

/// Target/prior query pair for one (template, target, attribute).
inline QueryPair build_query_pair(const Template& tpl, const std::string& target, const std::string& attribute,
                                  const MaskedLanguageModel& backend) {
  if (detail::trim(attribute).empty()) throw PreconditionError("attribute must not be empty");
  const auto target_ids = detail::tokenize_target(target, backend);
  const auto attribute_ids = backend.tokenize(attribute).ids;
  if (attribute_ids.empty()) throw PreconditionError("attribute '" + attribute + "' has no subword tokens");
  return detail::assemble_pair(detail::layout_template(tpl, backend), {target_ids}, attribute_ids);
}

// Sweep ----------------------------------------------------------------------

enum class TokenizationPolicy { ExcludeAndWarn, Strict };

struct SweepOptions {
  TokenizationPolicy policy = TokenizationPolicy::ExcludeAndWarn;
  int parallelism = 1;
  std::function<void(const std::string&)> on_warning;
};

/// Measures every (template, attribute, target) cell of `pack`.
inline ProbTable sweep(const LanguagePack& pack, const MaskedLanguageModel& backend, const SweepOptions& options = {}) {
  if (options.parallelism < 1) throw PreconditionError("parallelism must be >= 1");
  const auto& lex = pack.lexicon;
  auto warn = [&](const std::string& msg) {
    if (options.on_warning) options.on_warning(msg);
  };

  ProbTable table;
  table.templates = pack.templates;
  table.attributes = lex.attributes;
  table.provenance = {backend.info().model_id, pack.language(), pack.content_hash, {}};

  // Targets that cannot be tokenized are dropped for the whole table so every
  // cell shares the same N.
  std::vector<std::vector<TokenId>> target_ids;
  for (const auto& target : lex.targets) {
    try {
      target_ids.push_back(detail::tokenize_target(target, backend));
      table.targets.push_back(target);
    } catch (const UntokenizableError& e) {
      if (options.policy == TokenizationPolicy::Strict) throw;
      warn(std::string(e.what()) + "; excluded from every cell");
      table.provenance.excluded_targets.push_back(target);
    }
  }
  if (table.targets.size() < 2) throw ValidationError("fewer than 2 tokenizable targets remain");

  std::map<std::size_t, std::vector<std::size_t>> by_width;
  for (std::size_t n = 0; n < target_ids.size(); ++n) by_width[target_ids[n].size()].push_back(n);

  std::vector<detail::TemplateLayout> layouts;
  for (const auto& tpl : pack.templates) layouts.push_back(detail::layout_template(tpl, backend));
  std::vector<std::vector<TokenId>> attribute_ids;
  for (const auto& attr : lex.attributes) {
    attribute_ids.push_back(backend.tokenize(attr).ids);
    if (attribute_ids.back().empty()) throw ValidationError("attribute '" + attr + "' has no subword tokens");
  }

  const auto m = pack.templates.size();
  const auto o = lex.attributes.size();
  const auto n_targets = table.targets.size();
  table.cells.resize(m * o * n_targets);

  auto measure = [&](std::size_t t, std::size_t a) {
    for (const auto& [width, members] : by_width) {
      std::vector<std::vector<TokenId>> group;
      for (const auto n : members) group.push_back(target_ids[n]);
      const auto pair = detail::assemble_pair(layouts[t], group, attribute_ids[a]);
      const auto tgt_probs = backend.mask_probs(pair.target_query);
      const auto prior_probs = backend.mask_probs(pair.prior_query);
      for (std::size_t g = 0; g < members.size(); ++g) {
        const auto n = members[g];
        const double p_tgt = word_probability(tgt_probs, pair.target_span, group[g]);
        const double p_prior = word_probability(prior_probs, pair.target_span, group[g]);
        const auto norm = normalized_probability(p_tgt, p_prior);
        table.cells[table.index(t, a, n)] =
            ProbCell{pack.templates[t].id, a, n, p_tgt, p_prior, norm.ratio, norm.log_ratio};
      }
    }
  };

  const auto jobs = m * o;
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> done{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    while (!failed.load()) {
      const auto job = next.fetch_add(1);
      if (job >= jobs) return;
      try {
        measure(job / o, job % o);
        done.fetch_add(1);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        failed.store(true);
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    const auto workers = std::min<std::size_t>(static_cast<std::size_t>(options.parallelism), jobs);
    for (std::size_t i = 1; i < workers; ++i) pool.emplace_back(worker);
    worker();
  }
  if (error) {
    try {
      std::rethrow_exception(error);
    } catch (const BackendError& e) {
      throw SweepError(e.what(), done.load() * n_targets, jobs * n_targets);
    }
  }
  return table;
}

// Serialization --------------------------------------------------------------

namespace detail {

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace detail

inline nlohmann::json to_json(const ProbTable& table) {
  nlohmann::json templates = nlohmann::json::array();
  for (const auto& t : table.templates) templates.push_back({{"id", t.id}, {"pattern", t.pattern}});
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : table.cells) {
    cells.push_back({{"template_id", c.template_id},
                     {"attribute", table.attributes.at(c.attribute_index)},
                     {"target", table.targets.at(c.target_index)},
                     {"p_tgt", c.p_tgt},
                     {"p_prior", c.p_prior},
                     {"p_normalized", c.p_normalized},
                     {"log_normalized", c.log_normalized}});
  }
  return {{"language", table.provenance.language},
          {"model_id", table.provenance.model_id},
          {"pack_hash", table.provenance.pack_hash},
          {"excluded_targets", table.provenance.excluded_targets},
          {"templates", templates},
          {"attributes", table.attributes},
          {"targets", table.targets},
          {"cells", cells}};
}

/// Inverse of to_json. Cells may come in any order but must cover the grid
/// exactly once.
inline ProbTable prob_table_from_json(const nlohmann::json& doc) {
  ProbTable table;
  try {
    for (const auto& t : doc.at("templates")) {
      table.templates.push_back(Template{doc.value("language", ""), t.at("pattern").get<std::string>(),
                                         t.at("id").get<std::size_t>()});
    }
    table.attributes = doc.at("attributes").get<std::vector<std::string>>();
    table.targets = doc.at("targets").get<std::vector<std::string>>();
    table.provenance.language = doc.value("language", "");
    table.provenance.model_id = doc.value("model_id", "");
    table.provenance.pack_hash = doc.value("pack_hash", "");
    table.provenance.excluded_targets = doc.value("excluded_targets", std::vector<std::string>{});

    auto index_of = [](const std::vector<std::string>& list, const std::string& s, const char* what) {
      const auto it = std::find(list.begin(), list.end(), s);
      if (it == list.end()) throw ValidationError(std::string("cell refers to unknown ") + what + " '" + s + "'");
      return static_cast<std::size_t>(it - list.begin());
    };
    std::map<std::size_t, std::size_t> template_pos;
    for (std::size_t i = 0; i < table.templates.size(); ++i) {
      if (!template_pos.emplace(table.templates[i].id, i).second) throw ValidationError("duplicate template id");
    }
    table.cells.resize(table.templates.size() * table.attributes.size() * table.targets.size());
    std::vector<bool> seen(table.cells.size(), false);
    for (const auto& c : doc.at("cells")) {
      const auto tid = c.at("template_id").get<std::size_t>();
      const auto tp = template_pos.find(tid);
      if (tp == template_pos.end()) throw ValidationError("cell refers to unknown template id " + std::to_string(tid));
      const auto a = index_of(table.attributes, c.at("attribute").get<std::string>(), "attribute");
      const auto n = index_of(table.targets, c.at("target").get<std::string>(), "target");
      const auto idx = table.index(tp->second, a, n);
      if (seen[idx]) throw ValidationError("duplicate cell in probability table");
      seen[idx] = true;
      table.cells[idx] = ProbCell{tid,
                                  a,
                                  n,
                                  c.at("p_tgt").get<double>(),
                                  c.at("p_prior").get<double>(),
                                  c.at("p_normalized").get<double>(),
                                  c.at("log_normalized").get<double>()};
    }
    if (std::find(seen.begin(), seen.end(), false) != seen.end()) {
      throw ValidationError("probability table is missing cells; targets are inconsistent across cells");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, std::string("probability table: ") + e.what());
  }
  table.validate();
  return table;
}

inline std::string to_csv(const ProbTable& table) {
  std::string out = "template_id,attribute,target,p_tgt,p_prior,p_normalized,log_normalized\n";
  for (const auto& c : table.cells) {
    out += std::to_string(c.template_id) + ',' + detail::csv_field(table.attributes.at(c.attribute_index)) + ',' +
           detail::csv_field(table.targets.at(c.target_index)) + ',' + detail::format_double(c.p_tgt) + ',' +
           detail::format_double(c.p_prior) + ',' + detail::format_double(c.p_normalized) + ',' +
           detail::format_double(c.log_normalized) + '\n';
  }
  return out;
}

}  // namespace cbscore
