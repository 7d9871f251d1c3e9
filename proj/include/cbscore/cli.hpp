#pragma once

// Command-line front end: measure, compare and align.
//
// Exit codes: 0 success, 1 invalid input, 2 backend failure.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cbscore/align.hpp"
#include "cbscore/backend.hpp"
#include "cbscore/hashing.hpp"
#include "cbscore/http_backend.hpp"
#include "cbscore/lexicon.hpp"
#include "cbscore/metrics.hpp"
#include "cbscore/mock_backend.hpp"
#include "cbscore/prob.hpp"
#include "cbscore/svg.hpp"
#include "cbscore/table_backend.hpp"

#ifndef CBSCORE_VERSION
#define CBSCORE_VERSION "0.0.0"
#endif

namespace cbscore::cli {

enum ExitCode : int { kOk = 0, kInvalidInput = 1, kBackendFailure = 2 };

struct RunConfig {
  std::string command;
  std::string pack;
  std::string backend = "mock";
  /// align only; empty means "same as backend".
  std::string target_backend;
  int parallelism = 8;
  int retries = 2;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = ".";
  bool strict_tokenization = false;
  bool centered = false;
  // mock backend shape
  std::int64_t mock_hidden_dim = 8;
  std::size_t mock_split = 1;
  // compare
  std::vector<std::string> tables;
  std::vector<std::string> labels;
  bool by_position = false;
  // align
  std::string source_corpus;
  std::string target_corpus;
  std::string alignment;
  std::size_t cap = 100000;

  /// Canonical form used for the provenance hash. Output locations are left
  /// out so reruns into different directories hash the same.
  nlohmann::json canonical() const {
    return {{"command", command},          {"pack", pack},
            {"backend", backend},          {"target_backend", target_backend},
            {"seed", seed},                {"strict_tokenization", strict_tokenization},
            {"centered", centered},        {"mock_hidden_dim", mock_hidden_dim},
            {"mock_split", mock_split},    {"tables", tables},
            {"labels", labels},            {"by_position", by_position},
            {"source_corpus", source_corpus}, {"target_corpus", target_corpus},
            {"alignment", alignment},      {"cap", cap}};
  }

  std::string hash() const { return hashing::hex64(hashing::fnv1a(canonical().dump())); }
};

/// "mock", "table:<path>", "http" or "http:<url>".
inline std::unique_ptr<MaskedLanguageModel> make_backend(const std::string& spec, const RunConfig& cfg) {
  if (spec == "mock") {
    MockConfig mc;
    mc.seed = cfg.seed;
    mc.hidden_dim = cfg.mock_hidden_dim;
    mc.split_size = cfg.mock_split;
    return std::make_unique<MockBackend>(mc);
  }
  if (spec.rfind("table:", 0) == 0) {
    const std::filesystem::path path = spec.substr(6);
    if (!std::filesystem::is_regular_file(path)) throw ValidationError("table fixture not found: " + path.string());
    return std::make_unique<TableBackend>(TableBackend::from_file(path));
  }
  if (spec == "http" || spec.rfind("http:", 0) == 0) {
    HttpBackendConfig hc = spec == "http" ? HttpBackend::config_from_env() : HttpBackendConfig{};
    if (spec != "http") hc.base_url = spec.substr(5);
    hc.parallelism = cfg.parallelism;
    hc.retries = cfg.retries;
    return std::make_unique<HttpBackend>(hc);
  }
  throw ValidationError("unknown backend '" + spec + "' (expected mock, table:<path> or http[:<url>])");
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline nlohmann::json provenance(const RunConfig& cfg, const std::vector<std::string>& model_ids,
                                 const std::vector<std::string>& pack_hashes) {
  return {{"tool", "cbscore"},
          {"tool_version", CBSCORE_VERSION},
          {"command", cfg.command},
          {"config_hash", cfg.hash()},
          {"backend_model_ids", model_ids},
          {"pack_hashes", pack_hashes},
          {"generated_at", utc_timestamp()}};
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << content;
}

inline std::string read_text(const std::string& path) {
  if (!std::filesystem::is_regular_file(path)) throw ValidationError("file not found: " + path);
  return detail::read_file(path);
}

inline std::string dump(const nlohmann::json& doc) { return doc.dump(2) + "\n"; }

// Commands -------------------------------------------------------------------

inline int cmd_measure(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  if (cfg.pack.empty()) throw ValidationError("measure needs --pack");
  const auto pack = load_pack(cfg.pack);
  const auto backend = make_backend(cfg.backend, cfg);

  SweepOptions opts;
  opts.parallelism = cfg.parallelism;
  opts.policy = cfg.strict_tokenization ? TokenizationPolicy::Strict : TokenizationPolicy::ExcludeAndWarn;
  opts.on_warning = [&err](const std::string& msg) { err << "warning: " << msg << '\n'; };
  const auto table = sweep(pack, *backend, opts);
  const auto report = cb_score(table);

  const auto prov = provenance(cfg, {table.provenance.model_id}, {pack.content_hash});
  auto table_doc = to_json(table);
  table_doc["provenance"] = prov;
  auto report_doc = to_json(report, table);
  report_doc["provenance"] = prov;

  std::filesystem::create_directories(cfg.out_dir);
  write_file(cfg.out_dir / "prob_table.json", dump(table_doc));
  write_file(cfg.out_dir / "prob_table.csv", to_csv(table));
  write_file(cfg.out_dir / "cb_report.json", dump(report_doc));
  write_file(cfg.out_dir / "cell_variance.csv", variance_csv(report, table));

  out << "model: " << table.provenance.model_id << '\n';
  out << "templates: " << report.num_templates << "  attributes: " << report.num_attributes
      << "  targets: " << report.num_targets << '\n';
  out << "cb_score: " << detail::format_double(report.cb_score) << '\n';
  out << "top cells by variance:\n";
  for (const auto& c : top_cells(report, 5)) {
    out << "  template " << table.templates[c.template_index].id << "  attribute '"
        << table.attributes[c.attribute_index] << "'  variance " << detail::format_double(c.variance) << '\n';
  }
  return kOk;
}

inline int cmd_compare(const RunConfig& cfg, std::ostream& out, std::ostream&) {
  if (cfg.tables.size() < 2) throw ValidationError("compare needs at least 2 tables");
  if (!cfg.labels.empty() && cfg.labels.size() != cfg.tables.size()) {
    throw ValidationError("--labels must name every table");
  }
  std::vector<ProbTable> tables;
  std::vector<std::string> labels;
  std::vector<std::string> models;
  std::vector<std::string> hashes;
  for (std::size_t i = 0; i < cfg.tables.size(); ++i) {
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(read_text(cfg.tables[i]));
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(0, cfg.tables[i] + ": " + e.what());
    }
    tables.push_back(prob_table_from_json(doc));
    labels.push_back(cfg.labels.empty() ? tables.back().provenance.model_id : cfg.labels[i]);
    models.push_back(tables.back().provenance.model_id);
    hashes.push_back(tables.back().provenance.pack_hash);
  }
  const auto matching = cfg.by_position ? TargetMatching::ByPosition : TargetMatching::ByName;
  const auto matrix = jsd_matrix(tables, matching);

  std::vector<svg::Series> series;
  for (std::size_t i = 0; i < tables.size(); ++i) series.push_back({labels[i], pooled_profile(tables[i]).weights});
  const auto chart = svg::grouped_bar_chart("Normalized probability by target", tables[0].targets, series,
                                            "share of normalized probability");

  nlohmann::json doc = {{"labels", labels}, {"matrix", matrix}, {"target_matching", cfg.by_position ? "position" : "name"}};
  doc["provenance"] = provenance(cfg, models, hashes);
  std::string csv = "label";
  for (const auto& l : labels) csv += ',' + detail::csv_field(l);
  csv += '\n';
  for (std::size_t i = 0; i < matrix.size(); ++i) {
    csv += detail::csv_field(labels[i]);
    for (const double v : matrix[i]) csv += ',' + detail::format_double(v);
    csv += '\n';
  }

  std::filesystem::create_directories(cfg.out_dir);
  write_file(cfg.out_dir / "jsd_matrix.json", dump(doc));
  write_file(cfg.out_dir / "jsd_matrix.csv", csv);
  write_file(cfg.out_dir / "profiles.svg", chart);

  out << "jsd matrix (natural log):\n";
  for (std::size_t i = 0; i < matrix.size(); ++i) {
    out << "  " << labels[i];
    for (const double v : matrix[i]) out << "  " << detail::format_double(v);
    out << '\n';
  }
  return kOk;
}

inline int cmd_align(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  if (cfg.source_corpus.empty() || cfg.target_corpus.empty() || cfg.alignment.empty()) {
    throw ValidationError("align needs --source, --target and --alignment");
  }
  const auto src_text = read_text(cfg.source_corpus);
  const auto tgt_text = read_text(cfg.target_corpus);
  const auto links = parse_pharaoh(read_text(cfg.alignment));
  std::vector<std::string> src;
  std::vector<std::string> tgt;
  for (const auto l : split_lines(src_text)) src.emplace_back(l);
  for (const auto l : split_lines(tgt_text)) tgt.emplace_back(l);
  if (src.size() != tgt.size() || src.size() != links.size()) {
    throw ValidationError("line counts differ: source " + std::to_string(src.size()) + ", target " +
                          std::to_string(tgt.size()) + ", alignment " + std::to_string(links.size()));
  }
  const auto src_backend = make_backend(cfg.backend, cfg);
  const auto tgt_backend = cfg.target_backend.empty() ? nullptr : make_backend(cfg.target_backend, cfg);

  AnchorOptions opts;
  opts.cap = cfg.cap;
  opts.parallelism = cfg.parallelism;
  opts.on_warning = [&err](const std::string& msg) { err << "warning: " << msg << '\n'; };
  const auto anchors =
      extract_anchors(src, tgt, links, *src_backend, tgt_backend ? *tgt_backend : *src_backend, opts);
  const auto solved = procrustes_solve(anchors, ProcrustesOptions{cfg.centered});

  auto doc = to_json(solved);
  doc["skipped_links"] = anchors.skipped_links;
  doc["provenance"] = provenance(cfg, {solved.source_model, solved.target_model}, {});
  std::filesystem::create_directories(cfg.out_dir);
  write_file(cfg.out_dir / "alignment.json", dump(doc));

  out << "d: " << solved.dim() << '\n';
  out << "k: " << solved.anchors << '\n';
  out << "residual: " << detail::format_double(solved.residual) << '\n';
  out << "orthogonality_defect: " << detail::format_double(solved.orthogonality_defect) << '\n';
  return kOk;
}

inline int run(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  try {
    if (cfg.parallelism < 1) throw ValidationError("--parallelism must be >= 1");
    if (cfg.retries < 0) throw ValidationError("--retries must be >= 0");
    if (cfg.command == "measure") return cmd_measure(cfg, out, err);
    if (cfg.command == "compare") return cmd_compare(cfg, out, err);
    if (cfg.command == "align") return cmd_align(cfg, out, err);
    throw ValidationError("unknown command '" + cfg.command + "'");
  } catch (const BackendError& e) {
    err << "error: " << e.what() << '\n';
    return kBackendFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kInvalidInput;
  }
}

/// Parses `args` (without the program name) and runs the chosen command.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Categorical Bias measurement for masked language models", "cbscore"};
  app.set_version_flag("--version", std::string(CBSCORE_VERSION));
  app.require_subcommand(1);
  RunConfig cfg;

  auto globals = [&cfg](CLI::App* sub) {
    sub->add_option("--backend", cfg.backend, "mock | table:<path> | http[:<url>]");
    sub->add_option("--parallelism", cfg.parallelism, "worker threads / in-flight requests")->check(CLI::PositiveNumber);
    sub->add_option("--retries", cfg.retries, "retries on transport failure")->check(CLI::NonNegativeNumber);
    sub->add_option("--seed", cfg.seed, "mock backend seed");
    sub->add_option("--out-dir", cfg.out_dir, "directory for output documents");
    sub->add_option("--mock-dim", cfg.mock_hidden_dim, "mock backend hidden dimension")->check(CLI::PositiveNumber);
    sub->add_option("--mock-split", cfg.mock_split, "mock backend subword pieces per word")->check(CLI::PositiveNumber);
  };

  auto* measure = app.add_subcommand("measure", "sweep a language pack and compute the CB score");
  globals(measure);
  measure->add_option("--pack", cfg.pack, "language pack directory")->required();
  measure->add_flag("--strict-tokenization", cfg.strict_tokenization, "fail on untokenizable targets");

  auto* compare = app.add_subcommand("compare", "JSD matrix and profile chart across probability tables");
  globals(compare);
  compare->add_option("tables", cfg.tables, "prob_table.json files")->required()->expected(2, -1);
  compare->add_option("--labels", cfg.labels, "one label per table");
  compare->add_flag("--by-position", cfg.by_position, "pair targets by index (translated packs)");

  auto* align = app.add_subcommand("align", "orthogonal alignment matrix from a word-aligned parallel corpus");
  globals(align);
  align->add_option("--source", cfg.source_corpus, "source-language sentences")->required();
  align->add_option("--target", cfg.target_corpus, "target-language sentences")->required();
  align->add_option("--alignment", cfg.alignment, "Pharaoh i-j links, one line per sentence pair")->required();
  align->add_option("--target-backend", cfg.target_backend, "backend for the target side (default: --backend)");
  align->add_option("--cap", cfg.cap, "maximum number of anchors")->check(CLI::PositiveNumber);
  align->add_flag("--centered", cfg.centered, "mean-center anchors before solving");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForVersion&) {
    out << CBSCORE_VERSION << '\n';
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n' << app.help();
    return kInvalidInput;
  }
  cfg.command = app.get_subcommands().front()->get_name();
  return run(cfg, out, err);
}

}  // namespace cbscore::cli
