#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "cclseg/tensor.hpp"

// Evaluation: per-structure Dice, 95th-percentile symmetric boundary
// distance (pixel units, 4-connectivity boundaries, nearest-rank
// percentile), and fold-wise aggregation (average of the means and of the
// stds across folds).

namespace cclseg {

using Mask = Tensor<uint8_t>;  // [H,W], nonzero = inside

inline Index mask_count(const Mask& m) {
  Index n = 0;
  for (Index i = 0; i < m.numel(); ++i)
    if (m[i]) ++n;
  return n;
}

// 2|A∩B| / (|A|+|B|); both empty -> 1, one empty -> 0.
inline double dice(const Mask& a, const Mask& b) {
  CCLSEG_REQUIRE(a.shape() == b.shape(), "dice: shape mismatch");
  Index na = 0, nb = 0, ni = 0;
  for (Index i = 0; i < a.numel(); ++i) {
    const bool ia = a[i] != 0, ib = b[i] != 0;
    na += ia;
    nb += ib;
    ni += (ia && ib);
  }
  if (na == 0 && nb == 0) return 1.0;
  if (na == 0 || nb == 0) return 0.0;
  return 2.0 * static_cast<double>(ni) / static_cast<double>(na + nb);
}

struct Hd95Result {
  double value = 0.0;
  bool defined = true;  // false when exactly one mask is empty
};

namespace detail {

// Boundary = mask minus its 4-connectivity erosion; out-of-image neighbors
// count as background, so border pixels of the mask are boundary.
inline std::vector<std::pair<Index, Index>> boundary_pixels(const Mask& m) {
  const Index h = m.size(0), w = m.size(1);
  std::vector<std::pair<Index, Index>> out;
  for (Index r = 0; r < h; ++r)
    for (Index c = 0; c < w; ++c) {
      if (!m[r * w + c]) continue;
      const bool interior = r > 0 && r + 1 < h && c > 0 && c + 1 < w &&
                            m[(r - 1) * w + c] && m[(r + 1) * w + c] &&
                            m[r * w + c - 1] && m[r * w + c + 1];
      if (!interior) out.emplace_back(r, c);
    }
  return out;
}

inline void directed_min_distances(const std::vector<std::pair<Index, Index>>& from,
                                   const std::vector<std::pair<Index, Index>>& to,
                                   std::vector<double>& out) {
  for (const auto& p : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : to) {
      const double dr = static_cast<double>(p.first - q.first);
      const double dc = static_cast<double>(p.second - q.second);
      const double d2 = dr * dr + dc * dc;
      if (d2 < best) best = d2;
    }
    out.push_back(std::sqrt(best));
  }
}

// Nearest-rank percentile on a sorted copy: value at index ceil(q*n)-1.
inline double nearest_rank(std::vector<double> v, double q) {
  CCLSEG_REQUIRE(!v.empty(), "nearest_rank: empty sample");
  std::sort(v.begin(), v.end());
  const auto n = static_cast<double>(v.size());
  auto idx = static_cast<size_t>(std::ceil(q * n)) - 1;
  if (idx >= v.size()) idx = v.size() - 1;
  return v[idx];
}

}  // namespace detail

inline Hd95Result hd95(const Mask& pred, const Mask& gt) {
  CCLSEG_REQUIRE(pred.shape() == gt.shape(), "hd95: shape mismatch");
  const Index np = mask_count(pred), ng = mask_count(gt);
  if (np == 0 && ng == 0) return {0.0, true};
  if (np == 0 || ng == 0) return {0.0, false};
  const auto bp = detail::boundary_pixels(pred);
  const auto bg = detail::boundary_pixels(gt);
  std::vector<double> dists;
  dists.reserve(bp.size() + bg.size());
  detail::directed_min_distances(bp, bg, dists);
  detail::directed_min_distances(bg, bp, dists);
  return {detail::nearest_rank(std::move(dists), 0.95), true};
}

struct ClassMetrics {
  double dice_mean = 0.0, dice_std = 0.0;
  double hd95_mean = 0.0, hd95_std = 0.0;
  long undefined_hd95 = 0;
};

struct MetricsReport {
  std::vector<std::string> class_names;  // foreground classes only
  std::vector<ClassMetrics> per_class;
  ClassMetrics average;  // cross-class means of the columns above
};

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double var = 0;
  for (double x : v) var += (x - m) * (x - m);
  var /= static_cast<double>(v.size());
  return {m, std::sqrt(var)};
}

inline void fill_average(MetricsReport& r) {
  ClassMetrics avg;
  for (const auto& c : r.per_class) {
    avg.dice_mean += c.dice_mean;
    avg.dice_std += c.dice_std;
    avg.hd95_mean += c.hd95_mean;
    avg.hd95_std += c.hd95_std;
    avg.undefined_hd95 += c.undefined_hd95;
  }
  const auto n = static_cast<double>(r.per_class.size());
  if (n > 0) {
    avg.dice_mean /= n;
    avg.dice_std /= n;
    avg.hd95_mean /= n;
    avg.hd95_std /= n;
  }
  r.average = avg;
}

}  // namespace detail

// Per-slice class maps [H,W] with values in [0,K); class 0 is background and
// excluded. Metric statistics are over slices within the fold.
inline MetricsReport evaluate_slices(const std::vector<Mask>& pred_classmaps,
                                     const std::vector<Mask>& gt_classmaps,
                                     int num_classes,
                                     std::vector<std::string> class_names = {}) {
  CCLSEG_REQUIRE(pred_classmaps.size() == gt_classmaps.size(),
                 "evaluate_slices: count mismatch");
  CCLSEG_REQUIRE(!pred_classmaps.empty(), "evaluate_slices: no slices");
  MetricsReport rep;
  for (int k = 1; k < num_classes; ++k)
    rep.class_names.push_back(
        static_cast<size_t>(k - 1) < class_names.size()
            ? class_names[static_cast<size_t>(k - 1)]
            : "class" + std::to_string(k));

  for (int k = 1; k < num_classes; ++k) {
    std::vector<double> dices, hds;
    long undefined = 0;
    for (size_t s = 0; s < pred_classmaps.size(); ++s) {
      const Mask& pm = pred_classmaps[s];
      const Mask& gm = gt_classmaps[s];
      Mask pk(pm.shape()), gk(gm.shape());
      for (Index i = 0; i < pm.numel(); ++i) {
        pk[i] = pm[i] == k ? 1 : 0;
        gk[i] = gm[i] == k ? 1 : 0;
      }
      dices.push_back(dice(pk, gk));
      const Hd95Result h = hd95(pk, gk);
      if (h.defined)
        hds.push_back(h.value);
      else
        ++undefined;
    }
    ClassMetrics cm;
    auto [dm, ds] = detail::mean_std(dices);
    cm.dice_mean = dm;
    cm.dice_std = ds;
    auto [hm, hs] = detail::mean_std(hds);
    cm.hd95_mean = hm;
    cm.hd95_std = hs;
    cm.undefined_hd95 = undefined;
    rep.per_class.push_back(cm);
  }
  detail::fill_average(rep);
  return rep;
}

// Cross-fold aggregation: mean of the means and mean of the stds, per class
// per metric; undefined counts accumulate.
inline MetricsReport aggregate(const std::vector<MetricsReport>& folds) {
  CCLSEG_REQUIRE(!folds.empty(), "aggregate: no fold reports");
  MetricsReport out;
  out.class_names = folds[0].class_names;
  const size_t nc = folds[0].per_class.size();
  for (const auto& f : folds)
    CCLSEG_REQUIRE(f.per_class.size() == nc, "aggregate: fold class mismatch");
  out.per_class.assign(nc, ClassMetrics{});
  for (const auto& f : folds)
    for (size_t c = 0; c < nc; ++c) {
      out.per_class[c].dice_mean += f.per_class[c].dice_mean;
      out.per_class[c].dice_std += f.per_class[c].dice_std;
      out.per_class[c].hd95_mean += f.per_class[c].hd95_mean;
      out.per_class[c].hd95_std += f.per_class[c].hd95_std;
      out.per_class[c].undefined_hd95 += f.per_class[c].undefined_hd95;
    }
  const auto n = static_cast<double>(folds.size());
  for (auto& c : out.per_class) {
    c.dice_mean /= n;
    c.dice_std /= n;
    c.hd95_mean /= n;
    c.hd95_std /= n;
  }
  detail::fill_average(out);
  return out;
}

inline std::string metrics_csv(const MetricsReport& rep) {
  std::string s = "class,dice_mean,dice_std,hd95_mean,hd95_std,undefined_hd95_count\n";
  char buf[256];
  for (size_t c = 0; c < rep.per_class.size(); ++c) {
    const auto& m = rep.per_class[c];
    std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g,%.17g,%.17g,%ld\n",
                  rep.class_names[c].c_str(), m.dice_mean, m.dice_std,
                  m.hd95_mean, m.hd95_std, m.undefined_hd95);
    s += buf;
  }
  const auto& a = rep.average;
  std::snprintf(buf, sizeof(buf), "avg,%.17g,%.17g,%.17g,%.17g,%ld\n",
                a.dice_mean, a.dice_std, a.hd95_mean, a.hd95_std,
                a.undefined_hd95);
  s += buf;
  return s;
}

inline MetricsReport metrics_from_csv(const std::string& csv) {
  MetricsReport rep;
  size_t pos = csv.find('\n');
  CCLSEG_REQUIRE(pos != std::string::npos &&
                     csv.substr(0, pos) ==
                         "class,dice_mean,dice_std,hd95_mean,hd95_std,undefined_hd95_count",
                 "metrics_from_csv: unexpected header");
  ++pos;
  while (pos < csv.size()) {
    size_t eol = csv.find('\n', pos);
    if (eol == std::string::npos) eol = csv.size();
    const std::string line = csv.substr(pos, eol - pos);
    pos = eol + 1;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    size_t c0 = 0;
    while (true) {
      const size_t comma = line.find(',', c0);
      cells.push_back(line.substr(c0, comma - c0));
      if (comma == std::string::npos) break;
      c0 = comma + 1;
    }
    CCLSEG_REQUIRE(cells.size() == 6, "metrics_from_csv: malformed row: " + line);
    ClassMetrics m;
    m.dice_mean = std::stod(cells[1]);
    m.dice_std = std::stod(cells[2]);
    m.hd95_mean = std::stod(cells[3]);
    m.hd95_std = std::stod(cells[4]);
    m.undefined_hd95 = std::stol(cells[5]);
    if (cells[0] == "avg") {
      rep.average = m;
    } else {
      rep.class_names.push_back(cells[0]);
      rep.per_class.push_back(m);
    }
  }
  return rep;
}

// mean±std rows in the spirit of the usual results table.
inline std::string metrics_table(const std::string& title, const MetricsReport& rep) {
  std::string s = title + "\n";
  char buf[256];
  s += "  structure     dice (mean+/-std)   hd95 px (mean+/-std)  undef\n";
  auto row = [&](const std::string& name, const ClassMetrics& m) {
    std::snprintf(buf, sizeof(buf), "  %-12s  %.3f +/- %.3f      %6.2f +/- %6.2f   %ld\n",
                  name.c_str(), m.dice_mean, m.dice_std, m.hd95_mean, m.hd95_std,
                  m.undefined_hd95);
    s += buf;
  };
  for (size_t c = 0; c < rep.per_class.size(); ++c)
    row(rep.class_names[c], rep.per_class[c]);
  row("avg", rep.average);
  return s;
}

}  // namespace cclseg
