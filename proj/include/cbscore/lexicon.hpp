#pragma once

// Language packs: sentence templates with [TGT]/[ATTR] slots plus the target
// and attribute word lists they are filled from.

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "cbscore/error.hpp"
#include "cbscore/hashing.hpp"

namespace cbscore {

inline constexpr std::string_view kTargetPlaceholder = "[TGT]";
inline constexpr std::string_view kAttributePlaceholder = "[ATTR]";

enum class SlotRole { Target, Attribute };

inline std::string_view to_string(SlotRole role) {
  return role == SlotRole::Target ? "TGT" : "ATTR";
}

struct Template {
  std::string language;
  std::string pattern;
  std::size_t id = 0;

  bool operator==(const Template&) const = default;
};

struct Lexicon {
  std::string language;
  std::vector<std::string> targets;
  std::vector<std::string> attributes;
};

struct LanguagePack {
  std::vector<Template> templates;
  Lexicon lexicon;
  /// fnv1a64 over the source documents; empty for packs built in memory.
  std::string content_hash;

  const std::string& language() const { return lexicon.language; }
};

namespace detail {

inline std::size_t count_occurrences(std::string_view haystack, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = haystack.find(needle); pos != std::string_view::npos;
       pos = haystack.find(needle, pos + needle.size())) {
    ++n;
  }
  return n;
}

inline std::string_view trim(std::string_view s) {
  constexpr std::string_view ws = " \t\r\n\f\v";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

/// Throws ValidationError unless `pattern` holds each placeholder exactly
/// once and has some text besides them.
inline void validate_pattern(std::string_view pattern) {
  const auto n_tgt = detail::count_occurrences(pattern, kTargetPlaceholder);
  const auto n_attr = detail::count_occurrences(pattern, kAttributePlaceholder);
  if (n_tgt != 1) {
    throw ValidationError(n_tgt == 0 ? "template is missing [TGT]" : "template has more than one [TGT]");
  }
  if (n_attr != 1) {
    throw ValidationError(n_attr == 0 ? "template is missing [ATTR]" : "template has more than one [ATTR]");
  }
  std::string rest(pattern);
  rest.erase(rest.find(kTargetPlaceholder), kTargetPlaceholder.size());
  rest.erase(rest.find(kAttributePlaceholder), kAttributePlaceholder.size());
  if (detail::trim(rest).empty()) throw ValidationError("template is empty apart from its placeholders");
}

/// One pattern per line. Blank lines and lines starting with `#` are skipped.
/// Ids are assigned 0..k-1 in file order.
inline std::vector<Template> parse_template_file(std::string_view text, const std::string& language) {
  std::vector<Template> out;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    const auto line = detail::trim(text.substr(start, end - start));
    start = end + 1;
    if (line.empty() || line.front() == '#') continue;
    try {
      validate_pattern(line);
    } catch (const ValidationError& e) {
      throw ParseError(line_no, e.what());
    }
    out.push_back(Template{language, std::string(line), out.size()});
  }
  return out;
}

inline std::string serialize_templates(const std::vector<Template>& templates) {
  std::string out;
  for (const auto& t : templates) {
    out += t.pattern;
    out += '\n';
  }
  return out;
}

inline void validate_lexicon(const Lexicon& lex) {
  if (lex.language.empty()) throw ValidationError("lexicon has no language tag");
  auto check = [](const std::vector<std::string>& list, const char* name) {
    std::map<std::string_view, int> seen;
    std::string dups;
    for (const auto& s : list) {
      if (s.empty()) throw ValidationError(std::string(name) + " contains an empty string");
      if (++seen[s] == 2) dups += (dups.empty() ? "" : ", ") + s;
    }
    if (!dups.empty()) throw ValidationError(std::string("duplicate ") + name + ": " + dups);
  };
  check(lex.targets, "targets");
  check(lex.attributes, "attributes");
  if (lex.targets.size() < 2) throw ValidationError("lexicon needs at least 2 targets");
  if (lex.attributes.empty()) throw ValidationError("lexicon needs at least 1 attribute");
}

/// Parses `{"language": ..., "targets": [...], "attributes": [...]}`.
inline Lexicon parse_lexicon(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(0, std::string("lexicon: ") + e.what());
  }
  Lexicon lex;
  try {
    lex.language = doc.at("language").get<std::string>();
    lex.targets = doc.at("targets").get<std::vector<std::string>>();
    lex.attributes = doc.at("attributes").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, std::string("lexicon: ") + e.what());
  }
  validate_lexicon(lex);
  return lex;
}

inline LanguagePack make_pack(std::vector<Template> templates, Lexicon lexicon, std::string content_hash = {}) {
  validate_lexicon(lexicon);
  if (templates.empty()) throw ValidationError("language pack has no templates");
  for (const auto& t : templates) {
    if (t.language != lexicon.language) {
      throw ValidationError("template " + std::to_string(t.id) + " is tagged '" + t.language +
                            "' but the lexicon is '" + lexicon.language + "'");
    }
    validate_pattern(t.pattern);
  }
  return LanguagePack{std::move(templates), std::move(lexicon), std::move(content_hash)};
}

/// Loads `<dir>/templates.txt` and `<dir>/lexicon.json`.
inline LanguagePack load_pack(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ValidationError("pack directory not found: " + dir.string());
  const auto tpl_text = detail::read_file(dir / "templates.txt");
  const auto lex_text = detail::read_file(dir / "lexicon.json");
  auto lexicon = parse_lexicon(lex_text);
  auto templates = parse_template_file(tpl_text, lexicon.language);
  const auto h = hashing::fnv1a(lex_text, hashing::fnv1a(tpl_text + '\0'));
  return make_pack(std::move(templates), std::move(lexicon), hashing::hex64(h));
}

// Instantiation --------------------------------------------------------------

struct MaskSlot {
  bool operator==(const MaskSlot&) const = default;
};
inline constexpr MaskSlot kMask{};

/// What goes into a slot: a literal word or a mask span.
using SlotFill = std::variant<MaskSlot, std::string>;

struct MaskedSpan {
  SlotRole role;
  bool operator==(const MaskedSpan&) const = default;
};

/// A template with both slots resolved. Literal text and masked spans
/// alternate; filled slot words stay separate segments so callers can
/// tokenize them on their own.
struct SurfaceSentence {
  using Segment = std::variant<std::string, MaskedSpan>;
  std::vector<Segment> segments;

  std::string to_string() const {
    std::string out;
    for (const auto& seg : segments) {
      if (const auto* s = std::get_if<std::string>(&seg)) {
        out += *s;
      } else {
        out += "⟨MASK:";
        out += cbscore::to_string(std::get<MaskedSpan>(seg).role);
        out += "⟩";
      }
    }
    return out;
  }
};

inline SurfaceSentence instantiate(const Template& tpl, const SlotFill& target, const SlotFill& attribute) {
  validate_pattern(tpl.pattern);
  const std::string_view p = tpl.pattern;
  const auto tpos = p.find(kTargetPlaceholder);
  const auto apos = p.find(kAttributePlaceholder);

  struct Slot {
    std::size_t pos;
    std::size_t len;
    SlotRole role;
    const SlotFill* fill;
  };
  Slot first{tpos, kTargetPlaceholder.size(), SlotRole::Target, &target};
  Slot second{apos, kAttributePlaceholder.size(), SlotRole::Attribute, &attribute};
  if (second.pos < first.pos) std::swap(first, second);

  SurfaceSentence out;
  auto literal = [&](std::string_view s) {
    if (!s.empty()) out.segments.emplace_back(std::string(s));
  };
  auto fill = [&](const Slot& slot) {
    if (std::holds_alternative<MaskSlot>(*slot.fill)) {
      out.segments.emplace_back(MaskedSpan{slot.role});
    } else {
      const auto& word = std::get<std::string>(*slot.fill);
      if (word.empty()) throw PreconditionError("slot filler must not be empty");
      out.segments.emplace_back(word);
    }
  };
  literal(p.substr(0, first.pos));
  fill(first);
  literal(p.substr(first.pos + first.len, second.pos - first.pos - first.len));
  fill(second);
  literal(p.substr(second.pos + second.len));
  return out;
}

}  // namespace cbscore
