#pragma once

// Reconstruction probes under global-random (GMPC) and local-block (LMPC)
// masking, classification accuracy, few-shot aggregation and the report table.

#include <cmath>
#include <cstdio>
#include <functional>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "femae/data.hpp"
#include "femae/errors.hpp"
#include "femae/network.hpp"
#include "femae/training.hpp"

namespace femae {

enum class ProbeStrategy { GMPC, LMPC };

inline const char* to_string(ProbeStrategy s) { return s == ProbeStrategy::GMPC ? "GMPC" : "LMPC"; }

inline ProbeStrategy parse_strategy(std::string s) {
  for (auto& ch : s) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  if (s == "GMPC") return ProbeStrategy::GMPC;
  if (s == "LMPC") return ProbeStrategy::LMPC;
  throw UsageError("unknown probe strategy '" + s + "' (gmpc, lmpc)");
}

/// Branch that reconstructs a probe: global for GMPC, local for LMPC.
inline Branch probe_branch(ProbeStrategy s) { return s == ProbeStrategy::GMPC ? Branch::Global : Branch::Local; }

struct ProbeItem {
  std::string item;
  ProbeStrategy strategy = ProbeStrategy::GMPC;
  std::uint64_t seed = 0;
  double cd = 0;
};

struct ProbeResult {
  double mean = 0;
  std::vector<ProbeItem> items;
};

/// Mask plan for probe item `index`; identical for every model given the same seed.
template <typename T>
MaskPlan probe_mask(const PatchSet<T>& ps, ProbeStrategy s, double ratio, std::size_t blocks, Rng& rng) {
  return s == ProbeStrategy::GMPC ? global_random_mask(ps.count(), ratio, rng)
                                  : local_block_mask(ps.centers, ratio, rng, blocks);
}

/// Mean per-patch Chamfer between the reconstructed and the true masked patches (center-relative).
template <typename T>
ProbeResult probe_reconstruction(const PointFemae<T>& model, const std::vector<Sample<T>>& items, ProbeStrategy s,
                                 double ratio, std::uint64_t seed) {
  if (items.empty()) throw UsageError("probe needs at least one item");
  ProbeResult out;
  const Branch branch = model.resolve_branch(probe_branch(s));
  double total = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    Rng rng = step_rng(seed, i, s == ProbeStrategy::GMPC ? 1 : 2);
    PatchSet<T> ps = prepare(items[i].points, model.config(), Augmentation::None, rng);
    auto [vis, hid] = split(ps, probe_mask(ps, s, ratio, model.config().local_blocks, rng));
    Graph<T> g;
    Var<T> recon = model.reconstruct(g, vis, hid, branch);
    const double cd = static_cast<double>(patch_chamfer(recon, g.constant(hid.groups)).value()[0]);
    out.items.push_back({items[i].id, s, seed, cd});
    total += cd;
  }
  out.mean = total / static_cast<double>(items.size());
  return out;
}

inline std::string probe_jsonl(const std::vector<ProbeItem>& items) {
  std::string out;
  for (const auto& it : items) {
    nlohmann::json j = {{"item", it.item}, {"strategy", to_string(it.strategy)}, {"seed", it.seed}, {"cd", it.cd}};
    out += j.dump() + "\n";
  }
  return out;
}

inline std::vector<ProbeItem> parse_probe_jsonl(const std::string& text) {
  std::vector<ProbeItem> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      out.push_back({j.at("item").get<std::string>(), parse_strategy(j.at("strategy").get<std::string>()),
                     j.at("seed").get<std::uint64_t>(), j.at("cd").get<double>()});
    } catch (const std::exception& e) {
      throw ParseError(e.what(), lineno);
    }
  }
  return out;
}

/// Fraction of rows whose argmax equals the label.
template <typename T>
double accuracy(const Tensor<T>& logits, const std::vector<std::size_t>& labels) {
  if (logits.dim(0) != labels.size()) throw UsageError("accuracy: one label per logit row");
  std::size_t correct = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) correct += argmax_row(logits, r) == labels[r];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

/// Overall accuracy on full (unmasked) patch sets.
template <typename T>
double eval_classification(const PointFemae<T>& model, const std::vector<Sample<T>>& items, std::uint64_t seed = 0) {
  if (items.empty()) throw UsageError("classification eval needs at least one item");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    Rng rng = step_rng(seed, i, 3);
    PatchSet<T> ps = prepare(items[i].points, model.config(), Augmentation::None, rng);
    Graph<T> g;
    correct += argmax_row(model.classify(g, ps).value(), 0) == static_cast<std::size_t>(items[i].label);
  }
  return static_cast<double>(correct) / static_cast<double>(items.size());
}

/// Accuracy when only the visible patches of a GMPC/LMPC mask reach the matching branch.
template <typename T>
double eval_masked_classification(const PointFemae<T>& model, const std::vector<Sample<T>>& items, ProbeStrategy s,
                                  double ratio, std::uint64_t seed) {
  if (items.empty()) throw UsageError("classification eval needs at least one item");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    Rng rng = step_rng(seed, i, s == ProbeStrategy::GMPC ? 1 : 2);
    PatchSet<T> ps = prepare(items[i].points, model.config(), Augmentation::None, rng);
    auto [vis, hid] = split(ps, probe_mask(ps, s, ratio, model.config().local_blocks, rng));
    Graph<T> g;
    correct += argmax_row(model.classify_branch(g, vis, probe_branch(s)).value(), 0) ==
               static_cast<std::size_t>(items[i].label);
  }
  return static_cast<double>(correct) / static_cast<double>(items.size());
}

struct FewShotResult {
  double mean = 0;
  double std = 0;  // population standard deviation over episodes
  std::vector<double> accuracies;
};

inline FewShotResult summarize(std::vector<double> acc) {
  FewShotResult r;
  r.accuracies = std::move(acc);
  if (r.accuracies.empty()) return r;
  double s = 0;
  for (double a : r.accuracies) s += a;
  r.mean = s / static_cast<double>(r.accuracies.size());
  double v = 0;
  for (double a : r.accuracies) v += (a - r.mean) * (a - r.mean);
  r.std = std::sqrt(v / static_cast<double>(r.accuracies.size()));
  return r;
}

/// `factory(n_way)` returns a fresh model (pre-trained encoder, new n_way head) per episode.
/// `clouds[i]` is the cloud of manifest entry i.
template <typename T>
FewShotResult few_shot_eval(const std::function<std::unique_ptr<PointFemae<T>>(std::size_t)>& factory,
                            const DatasetManifest& manifest, const std::vector<Tensor<T>>& clouds, std::size_t n_way,
                            std::size_t m_shot, std::size_t episodes, TrainConfig tc, std::uint64_t seed) {
  if (clouds.size() != manifest.entries.size()) throw UsageError("few_shot_eval: one cloud per manifest entry");
  std::vector<double> acc;
  for (std::size_t e = 0; e < episodes; ++e) {
    Rng rng = step_rng(seed, e, 4);
    const Episode ep = few_shot_episode(manifest, n_way, m_shot, rng);
    auto relabel = [&](const std::vector<std::size_t>& idx) {
      std::vector<Sample<T>> out;
      for (std::size_t i : idx) {
        out.push_back({manifest.entries[i].path, ep.episode_label(manifest.entries[i].label), clouds[i]});
      }
      return out;
    };
    auto model = factory(n_way);
    tc.seed = seed + e;
    run_finetune(*model, relabel(ep.support), tc);
    acc.push_back(eval_classification(*model, relabel(ep.query), seed));
  }
  return summarize(std::move(acc));
}

// ---------------------------------------------------------------------------
// Report table
// ---------------------------------------------------------------------------

struct ReportRow {
  std::string model;
  std::string variant;
  std::vector<std::uint64_t> seeds;
  std::optional<double> gmpc_cd;
  std::optional<double> lmpc_cd;
  std::optional<double> gmpc_acc;
  std::optional<double> lmpc_acc;

  bool operator==(const ReportRow&) const = default;
};

inline constexpr const char* kReportHeader = "model,variant,seeds,gmpc_cd,lmpc_cd,gmpc_acc,lmpc_acc";

namespace eval_detail {

inline std::string cell(const std::optional<double>& v) {
  if (!v) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", *v);
  return buf;
}

inline std::string seeds_str(const std::vector<std::uint64_t>& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? ";" : "") + std::to_string(s[i]);
  return out;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace eval_detail

inline std::string report_csv(const std::vector<ReportRow>& rows) {
  using eval_detail::cell;
  std::string out = std::string(kReportHeader) + "\n";
  for (const auto& r : rows) {
    if (r.model.find(',') != std::string::npos) throw UsageError("model id may not contain commas: '" + r.model + "'");
    out += r.model + "," + r.variant + "," + eval_detail::seeds_str(r.seeds) + "," + cell(r.gmpc_cd) + "," +
           cell(r.lmpc_cd) + "," + cell(r.gmpc_acc) + "," + cell(r.lmpc_acc) + "\n";
  }
  return out;
}

inline std::vector<ReportRow> parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  std::vector<ReportRow> rows;
  auto opt = [&](const std::string& s) -> std::optional<double> {
    if (s.empty()) return std::nullopt;
    try {
      return std::stod(s);
    } catch (const std::exception&) {
      throw ParseError("bad number '" + s + "'", lineno);
    }
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1) {
      if (line != kReportHeader) throw ParseError("unexpected report header", 1);
      continue;
    }
    if (line.empty()) continue;
    auto f = eval_detail::split_csv(line);
    if (f.size() != 7) throw ParseError("expected 7 fields, found " + std::to_string(f.size()), lineno);
    ReportRow r{f[0], f[1], {}, opt(f[3]), opt(f[4]), opt(f[5]), opt(f[6])};
    std::istringstream ss(f[2]);
    for (std::string s; std::getline(ss, s, ';');) r.seeds.push_back(std::stoull(s));
    rows.push_back(std::move(r));
  }
  return rows;
}

/// Aligned plain-text rendering of the same grid.
inline std::string report_text(const std::vector<ReportRow>& rows) {
  auto fmt = [](const std::optional<double>& v, const char* f) {
    if (!v) return std::string("-");
    char buf[40];
    std::snprintf(buf, sizeof buf, f, *v);
    return std::string(buf);
  };
  std::vector<std::vector<std::string>> cells = {
      {"model", "variant", "seeds", "GMPC CD", "LMPC CD", "GMPC acc", "LMPC acc"}};
  for (const auto& r : rows) {
    cells.push_back({r.model, r.variant, eval_detail::seeds_str(r.seeds), fmt(r.gmpc_cd, "%.6f"),
                     fmt(r.lmpc_cd, "%.6f"), fmt(r.gmpc_acc, "%.4f"), fmt(r.lmpc_acc, "%.4f")});
  }
  std::vector<std::size_t> width(7, 0);
  for (const auto& row : cells)
    for (std::size_t c = 0; c < 7; ++c) width[c] = std::max(width[c], row[c].size());
  std::string out;
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < 7; ++c) {
      std::string v = row[c];
      if (c >= 3) v.insert(0, width[c] - v.size(), ' ');
      else v.append(width[c] - v.size(), ' ');
      out += (c ? "  " : "") + v;
    }
    out += "\n";
  }
  return out;
}

}  // namespace femae
