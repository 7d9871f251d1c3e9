#pragma once

// Anchor extraction from word-aligned parallel text and the orthogonal
// Procrustes solve W = U V^T for SVD(Y X^T) = U S V^T.

#include <algorithm>
#include <atomic>
#include <cctype>
#include <charconv>
#include <cmath>
#include <exception>
#include <functional>
#include <cstdint>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SVD>
#include <json.hpp>

#include "cbscore/backend.hpp"

namespace cbscore {

/// Links (source word, target word) for one sentence pair.
struct PharaohAlignment {
  std::vector<std::pair<std::size_t, std::size_t>> links;
};

/// Splits on '\n'; a trailing newline does not start an extra line.
inline std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    out.push_back(line);
    start = end + 1;
  }
  return out;
}

inline std::vector<std::string> split_whitespace(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    const auto b = i;
    while (i < s.size() && !std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    if (i > b) out.emplace_back(s.substr(b, i - b));
  }
  return out;
}

/// Parses fast_align output: one line per sentence pair, "i-j" tokens.
inline std::vector<PharaohAlignment> parse_pharaoh(std::string_view text) {
  std::vector<PharaohAlignment> out;
  const auto lines = split_lines(text);
  for (std::size_t ln = 0; ln < lines.size(); ++ln) {
    PharaohAlignment a;
    for (const auto& tok : split_whitespace(lines[ln])) {
      const auto dash = tok.find('-');
      std::size_t i = 0;
      std::size_t j = 0;
      const auto* b = tok.data();
      const auto* e = tok.data() + tok.size();
      bool ok = dash != std::string::npos && dash > 0 && dash + 1 < tok.size();
      if (ok) {
        const auto r1 = std::from_chars(b, b + dash, i);
        const auto r2 = std::from_chars(b + dash + 1, e, j);
        ok = r1.ec == std::errc{} && r1.ptr == b + dash && r2.ec == std::errc{} && r2.ptr == e;
      }
      if (!ok) throw ParseError(ln + 1, "malformed alignment link '" + tok + "'");
      a.links.emplace_back(i, j);
    }
    out.push_back(std::move(a));
  }
  return out;
}

struct AnchorProvenance {
  std::size_t sentence;
  std::size_t source_word;
  std::size_t target_word;
};

/// Column-paired anchor vectors: X (source) and Y (target), both d x k.
struct AnchorSet {
  Eigen::MatrixXd source;
  Eigen::MatrixXd target;
  std::vector<AnchorProvenance> provenance;
  std::size_t skipped_links = 0;
  std::vector<std::string> warnings;
  std::string source_model;
  std::string target_model;

  Eigen::Index dim() const { return source.rows(); }
  Eigen::Index count() const { return source.cols(); }
};

struct AnchorOptions {
  std::size_t cap = 100000;
  int parallelism = 1;
  std::function<void(const std::string&)> on_warning;
};

namespace detail {

/// d x words matrix of subword-mean word vectors for a whitespace sentence.
inline Eigen::MatrixXd word_vectors(const std::vector<std::string>& words, const MaskedLanguageModel& backend) {
  std::vector<TokenId> ids;
  std::vector<TokenSpan> spans;
  for (const auto& w : words) {
    const auto t = backend.tokenize(w).ids;
    if (t.empty()) throw BackendError("word '" + w + "' produced no tokens");
    spans.push_back({ids.size(), ids.size() + t.size()});
    ids.insert(ids.end(), t.begin(), t.end());
  }
  const auto hs = backend.hidden_states(ids);
  if (hs.dim() != backend.info().hidden_dim || hs.count() != static_cast<Eigen::Index>(ids.size())) {
    throw ProtocolError("hidden_states shape does not match the request");
  }
  Eigen::MatrixXd out(hs.dim(), static_cast<Eigen::Index>(words.size()));
  for (std::size_t w = 0; w < spans.size(); ++w) {
    const auto& s = spans[w];
    out.col(static_cast<Eigen::Index>(w)) =
        hs.vectors.middleCols(static_cast<Eigen::Index>(s.begin), static_cast<Eigen::Index>(s.size())).rowwise().mean();
  }
  return out;
}

}  // namespace detail

/// One anchor column per in-range link, in sentence then link order, up to
/// `options.cap` columns.
inline AnchorSet extract_anchors(std::span<const std::string> source_sentences,
                                 std::span<const std::string> target_sentences,
                                 std::span<const PharaohAlignment> alignments, const MaskedLanguageModel& source_backend,
                                 const MaskedLanguageModel& target_backend, const AnchorOptions& options = {}) {
  if (source_sentences.size() != target_sentences.size() || source_sentences.size() != alignments.size()) {
    throw ValidationError("corpus and alignment line counts differ: " + std::to_string(source_sentences.size()) +
                          " / " + std::to_string(target_sentences.size()) + " / " +
                          std::to_string(alignments.size()));
  }
  const auto d = source_backend.info().hidden_dim;
  if (d != target_backend.info().hidden_dim) {
    throw ValidationError("backends disagree on hidden_dim: " + std::to_string(d) + " vs " +
                          std::to_string(target_backend.info().hidden_dim));
  }
  if (options.parallelism < 1) throw PreconditionError("parallelism must be >= 1");

  struct SentenceResult {
    std::vector<std::pair<std::size_t, std::size_t>> used;
    std::vector<std::string> skipped;
    Eigen::MatrixXd src;
    Eigen::MatrixXd tgt;
  };
  const auto n = alignments.size();
  std::vector<SentenceResult> results(n);

  auto process = [&](std::size_t s) {
    auto& r = results[s];
    const auto src_words = split_whitespace(source_sentences[s]);
    const auto tgt_words = split_whitespace(target_sentences[s]);
    for (const auto& [i, j] : alignments[s].links) {
      if (i < src_words.size() && j < tgt_words.size()) {
        r.used.emplace_back(i, j);
      } else {
        r.skipped.push_back("sentence " + std::to_string(s) + ": link " + std::to_string(i) + "-" +
                            std::to_string(j) + " is out of range; skipped");
      }
    }
    if (r.used.empty()) return;
    r.src = detail::word_vectors(src_words, source_backend);
    r.tgt = detail::word_vectors(tgt_words, target_backend);
  };

  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    while (!failed.load()) {
      const auto s = next.fetch_add(1);
      if (s >= n) return;
      try {
        process(s);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        failed.store(true);
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    const auto workers = std::min<std::size_t>(static_cast<std::size_t>(options.parallelism), std::max<std::size_t>(n, 1));
    for (std::size_t i = 1; i < workers; ++i) pool.emplace_back(worker);
    worker();
  }
  if (error) std::rethrow_exception(error);

  AnchorSet out;
  out.source_model = source_backend.info().model_id;
  out.target_model = target_backend.info().model_id;
  auto warn = [&](std::string msg) {
    if (options.on_warning) options.on_warning(msg);
    out.warnings.push_back(std::move(msg));
  };
  std::size_t k = 0;
  for (const auto& r : results) k += r.used.size();
  k = std::min(k, options.cap);
  out.source.resize(d, static_cast<Eigen::Index>(k));
  out.target.resize(d, static_cast<Eigen::Index>(k));
  std::size_t col = 0;
  for (std::size_t s = 0; s < n; ++s) {
    auto& r = results[s];
    out.skipped_links += r.skipped.size();
    for (auto& msg : r.skipped) warn(std::move(msg));
    for (const auto& [i, j] : r.used) {
      if (col == k) break;
      out.source.col(static_cast<Eigen::Index>(col)) = r.src.col(static_cast<Eigen::Index>(i));
      out.target.col(static_cast<Eigen::Index>(col)) = r.tgt.col(static_cast<Eigen::Index>(j));
      out.provenance.push_back({s, i, j});
      ++col;
    }
  }
  if (k == 0) throw ValidationError("no usable anchors in the aligned corpus");
  if (static_cast<std::int64_t>(k) < d) {
    warn("only " + std::to_string(k) + " anchors for dimension " + std::to_string(d) + "; solution is underdetermined");
  }
  return out;
}

// Procrustes -----------------------------------------------------------------

struct ProcrustesOptions {
  /// Subtract each side's mean vector before solving.
  bool centered = false;
};

struct AlignmentMatrix {
  Eigen::MatrixXd W;
  /// Frobenius norm of W X - Y over the anchors used in the solve.
  double residual = 0.0;
  double orthogonality_defect = 0.0;
  std::size_t anchors = 0;
  bool centered = false;
  std::string source_model;
  std::string target_model;
  std::vector<std::string> warnings;

  Eigen::Index dim() const { return W.rows(); }
};

inline constexpr double kOrthogonalityTolerance = 1e-8;

/// max |W^T W - I|
inline double orthogonality_defect(const Eigen::MatrixXd& W) {
  const auto I = Eigen::MatrixXd::Identity(W.cols(), W.cols());
  return (W.transpose() * W - I).cwiseAbs().maxCoeff();
}

/// Orthogonal W minimizing ||W X - Y||_F, reflections included.
inline Eigen::MatrixXd procrustes(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) {
  if (X.rows() != Y.rows() || X.cols() != Y.cols() || X.cols() < 1) {
    throw PreconditionError("procrustes needs X and Y of equal shape with at least one column");
  }
  if (!X.allFinite() || !Y.allFinite()) throw PreconditionError("procrustes input is not finite");
  const Eigen::MatrixXd M = Y * X.transpose();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(M, Eigen::ComputeFullU | Eigen::ComputeFullV);
  if (svd.info() != Eigen::Success) throw NumericError("SVD did not converge");
  Eigen::MatrixXd W = svd.matrixU() * svd.matrixV().transpose();
  if (!W.allFinite()) throw NumericError("SVD produced non-finite factors");
  return W;
}

inline AlignmentMatrix procrustes_solve(const AnchorSet& anchors, const ProcrustesOptions& options = {}) {
  Eigen::MatrixXd X = anchors.source;
  Eigen::MatrixXd Y = anchors.target;
  if (options.centered) {
    X.colwise() -= X.rowwise().mean();
    Y.colwise() -= Y.rowwise().mean();
  }
  AlignmentMatrix out;
  out.W = procrustes(X, Y);
  out.residual = (out.W * X - Y).norm();
  out.orthogonality_defect = orthogonality_defect(out.W);
  out.anchors = static_cast<std::size_t>(X.cols());
  out.centered = options.centered;
  out.source_model = anchors.source_model;
  out.target_model = anchors.target_model;
  out.warnings = anchors.warnings;
  if (X.cols() < X.rows()) {
    out.warnings.push_back("k = " + std::to_string(X.cols()) + " < d = " + std::to_string(X.rows()));
  }
  if (out.orthogonality_defect > kOrthogonalityTolerance) {
    throw NumericError("solution is not orthogonal (defect " + std::to_string(out.orthogonality_defect) + ")");
  }
  return out;
}

/// Maps every vector x to W x.
inline HiddenStates apply_alignment(const AlignmentMatrix& alignment, const HiddenStates& states) {
  if (states.dim() != alignment.dim()) {
    throw ValidationError("vectors have dimension " + std::to_string(states.dim()) + " but W is " +
                          std::to_string(alignment.dim()) + "x" + std::to_string(alignment.dim()));
  }
  HiddenStates out;
  out.layer = states.layer;
  out.vectors = alignment.W * states.vectors;
  return out;
}

inline nlohmann::json to_json(const AlignmentMatrix& a) {
  std::vector<double> row_major;
  row_major.reserve(static_cast<std::size_t>(a.W.size()));
  for (Eigen::Index r = 0; r < a.W.rows(); ++r) {
    for (Eigen::Index c = 0; c < a.W.cols(); ++c) row_major.push_back(a.W(r, c));
  }
  return {{"d", a.W.rows()},
          {"W", row_major},
          {"residual", a.residual},
          {"orthogonality_defect", a.orthogonality_defect},
          {"anchors", a.anchors},
          {"centered", a.centered},
          {"source_model", a.source_model},
          {"target_model", a.target_model},
          {"warnings", a.warnings}};
}

inline AlignmentMatrix alignment_from_json(const nlohmann::json& doc) {
  AlignmentMatrix a;
  try {
    const auto d = doc.at("d").get<Eigen::Index>();
    const auto values = doc.at("W").get<std::vector<double>>();
    if (d < 1 || static_cast<Eigen::Index>(values.size()) != d * d) {
      throw ValidationError("alignment matrix has " + std::to_string(values.size()) + " values for d = " +
                            std::to_string(d));
    }
    a.W.resize(d, d);
    for (Eigen::Index r = 0; r < d; ++r) {
      for (Eigen::Index c = 0; c < d; ++c) a.W(r, c) = values[static_cast<std::size_t>(r * d + c)];
    }
    a.residual = doc.at("residual").get<double>();
    a.orthogonality_defect = doc.value("orthogonality_defect", orthogonality_defect(a.W));
    a.anchors = doc.value("anchors", std::size_t{0});
    a.centered = doc.value("centered", false);
    a.source_model = doc.value("source_model", "");
    a.target_model = doc.value("target_model", "");
    a.warnings = doc.value("warnings", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, std::string("alignment matrix: ") + e.what());
  }
  return a;
}

}  // namespace cbscore
