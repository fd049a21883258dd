#include "textcsp/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "textcsp/core/io.hpp"
#include "textcsp/nn/ops.hpp"

namespace textcsp::metrics {

namespace {

void require_grid(const Mask& m, const char* what) {
  if (m.rank() != 3) throw ShapeError(std::string(what) + ": expected a [D, H, W] mask, got " + shape_str(m.shape()));
}

constexpr double kInf = std::numeric_limits<double>::infinity();

// One pass of the Felzenszwalb-Huttenlocher lower envelope along a line of n
// samples with stride `stride`, weight w = spacing^2.
void envelope_pass(double* f, Index n, Index stride, double w, std::vector<double>& buf, std::vector<Index>& v,
                   std::vector<double>& z) {
  buf.resize(static_cast<std::size_t>(n));
  v.resize(static_cast<std::size_t>(n));
  z.resize(static_cast<std::size_t>(n + 1));
  for (Index i = 0; i < n; ++i) buf[static_cast<std::size_t>(i)] = f[i * stride];
  Index k = -1;
  for (Index q = 0; q < n; ++q) {
    const double fq = buf[static_cast<std::size_t>(q)];
    if (fq == kInf) continue;
    const double dq = static_cast<double>(q);
    while (k >= 0) {
      const Index p = v[static_cast<std::size_t>(k)];
      const double dp = static_cast<double>(p);
      const double s = ((fq + w * dq * dq) - (buf[static_cast<std::size_t>(p)] + w * dp * dp)) / (2.0 * w * (dq - dp));
      if (s <= z[static_cast<std::size_t>(k)]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    if (k == 0) {
      z[0] = -kInf;
    } else {
      const Index p = v[static_cast<std::size_t>(k - 1)];
      const double dp = static_cast<double>(p);
      z[static_cast<std::size_t>(k)] =
          ((fq + w * dq * dq) - (buf[static_cast<std::size_t>(p)] + w * dp * dp)) / (2.0 * w * (dq - dp));
    }
    z[static_cast<std::size_t>(k + 1)] = kInf;
  }
  if (k < 0) return;  // whole line unreachable; leave as infinity
  Index j = 0;
  for (Index q = 0; q < n; ++q) {
    const double dq = static_cast<double>(q);
    while (z[static_cast<std::size_t>(j + 1)] < dq) ++j;
    const Index p = v[static_cast<std::size_t>(j)];
    const double diff = dq - static_cast<double>(p);
    f[q * stride] = w * diff * diff + buf[static_cast<std::size_t>(p)];
  }
}

}  // namespace

double dice(const Mask& pred, const Mask& gt) {
  require_same_shape(pred, gt, "dice");
  Index a = 0, b = 0, both = 0;
  for (Index i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    a += p;
    b += g;
    both += p && g;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

std::vector<Index> surface_voxels(const Mask& mask) {
  require_grid(mask, "surface_voxels");
  const Index d = mask.dim(0), h = mask.dim(1), w = mask.dim(2);
  std::vector<Index> out;
  for (Index z = 0; z < d; ++z)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) {
        const Index i = (z * h + y) * w + x;
        if (!mask[i]) continue;
        const bool edge = z == 0 || z == d - 1 || y == 0 || y == h - 1 || x == 0 || x == w - 1;
        if (edge || !mask[i - h * w] || !mask[i + h * w] || !mask[i - w] || !mask[i + w] || !mask[i - 1] ||
            !mask[i + 1])
          out.push_back(i);
      }
  return out;
}

std::vector<double> squared_distance_to(const std::vector<Index>& targets, const Shape& shape, const Spacing& spacing) {
  if (shape.size() != 3) throw ShapeError("squared_distance_to: expected a 3D shape");
  const Index d = shape[0], h = shape[1], w = shape[2];
  std::vector<double> f(static_cast<std::size_t>(d * h * w), kInf);
  for (Index t : targets) f[static_cast<std::size_t>(t)] = 0.0;
  std::vector<double> buf, z;
  std::vector<Index> v;
  const double wx = spacing[2] * spacing[2], wy = spacing[1] * spacing[1], wz = spacing[0] * spacing[0];
  for (Index zz = 0; zz < d; ++zz)
    for (Index y = 0; y < h; ++y) envelope_pass(f.data() + (zz * h + y) * w, w, 1, wx, buf, v, z);
  for (Index zz = 0; zz < d; ++zz)
    for (Index x = 0; x < w; ++x) envelope_pass(f.data() + zz * h * w + x, h, w, wy, buf, v, z);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) envelope_pass(f.data() + y * w + x, d, h * w, wz, buf, v, z);
  return f;
}

double grid_diagonal(const Shape& shape, const Spacing& spacing) {
  double s = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double e = static_cast<double>(shape[static_cast<std::size_t>(a)]) * spacing[static_cast<std::size_t>(a)];
    s += e * e;
  }
  return std::sqrt(s);
}

double percentile(std::vector<double>& values, double q) {
  if (values.empty()) throw ShapeError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

Hd95 hd95(const Mask& pred, const Mask& gt, const Spacing& spacing) {
  require_same_shape(pred, gt, "hd95");
  require_grid(pred, "hd95");
  const auto sp = surface_voxels(pred);
  const auto sg = surface_voxels(gt);
  if (sp.empty() && sg.empty()) return {0.0, false};
  if (sp.empty() || sg.empty()) return {grid_diagonal(pred.shape(), spacing), true};
  std::vector<double> pooled;
  pooled.reserve(sp.size() + sg.size());
  const auto to_gt = squared_distance_to(sg, pred.shape(), spacing);
  for (Index i : sp) pooled.push_back(std::sqrt(to_gt[static_cast<std::size_t>(i)]));
  const auto to_pred = squared_distance_to(sp, pred.shape(), spacing);
  for (Index i : sg) pooled.push_back(std::sqrt(to_pred[static_cast<std::size_t>(i)]));
  return {percentile(pooled, 95.0), false};
}

double containment_violation(const Mask& wt, const Mask& tc, const Mask& et) {
  require_same_shape(wt, tc, "containment_violation");
  require_same_shape(tc, et, "containment_violation");
  Index bad = 0, denom = 0;
  for (Index i = 0; i < wt.size(); ++i) {
    const bool w = wt[i] != 0, t = tc[i] != 0, e = et[i] != 0;
    bad += (e && !t) + (t && !w);
    denom += e + t;
  }
  return denom == 0 ? 0.0 : static_cast<double>(bad) / static_cast<double>(denom);
}

Mask region(const Tensor<std::uint8_t>& labels, int r, Index sample) {
  Shape s = labels.shape();
  if (s.size() == 4) s.insert(s.begin(), 1);
  if (s.size() != 5 || s[1] != 3) throw ShapeError("region: expected [3, D, H, W] labels, got " + shape_str(labels.shape()));
  if (sample < 0 || sample >= s[0] || r < 0 || r > 2) throw ShapeError("region: index out of range");
  const Index vox = s[2] * s[3] * s[4];
  const auto* src = labels.data() + (sample * 3 + r) * vox;
  return Mask(Shape{s[2], s[3], s[4]}, std::vector<std::uint8_t>(src, src + vox));
}

CaseMetrics evaluate_case(const std::string& case_id, const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& gt,
                          const Spacing& spacing) {
  require_same_shape(pred, gt, "evaluate_case");
  CaseMetrics m;
  m.case_id = case_id;
  std::array<Mask, 3> p;
  for (int r = 0; r < 3; ++r) {
    p[static_cast<std::size_t>(r)] = region(pred, r);
    const Mask g = region(gt, r);
    m.dice[static_cast<std::size_t>(r)] = dice(p[static_cast<std::size_t>(r)], g);
    const auto h = hd95(p[static_cast<std::size_t>(r)], g, spacing);
    m.hd95[static_cast<std::size_t>(r)] = h.value;
    m.hd95_sentinel[static_cast<std::size_t>(r)] = h.sentinel;
  }
  m.violation = containment_violation(p[0], p[1], p[2]);
  return m;
}

std::array<double, 3> MetricReport::mean_dice() const {
  std::array<double, 3> s{};
  for (const auto& c : cases)
    for (int r = 0; r < 3; ++r) s[static_cast<std::size_t>(r)] += c.dice[static_cast<std::size_t>(r)];
  for (auto& v : s) v = cases.empty() ? 0.0 : v / static_cast<double>(cases.size());
  return s;
}

std::array<double, 3> MetricReport::mean_hd95() const {
  std::array<double, 3> s{};
  for (const auto& c : cases)
    for (int r = 0; r < 3; ++r) s[static_cast<std::size_t>(r)] += c.hd95[static_cast<std::size_t>(r)];
  for (auto& v : s) v = cases.empty() ? 0.0 : v / static_cast<double>(cases.size());
  return s;
}

double MetricReport::avg_dice() const {
  const auto d = mean_dice();
  return (d[0] + d[1] + d[2]) / 3.0;
}

double MetricReport::avg_hd95() const {
  const auto h = mean_hd95();
  return (h[0] + h[1] + h[2]) / 3.0;
}

double MetricReport::mean_violation() const {
  double s = 0.0;
  for (const auto& c : cases) s += c.violation;
  return cases.empty() ? 0.0 : s / static_cast<double>(cases.size());
}

int MetricReport::sentinel_count() const {
  int n = 0;
  for (const auto& c : cases)
    for (bool b : c.hd95_sentinel) n += b;
  return n;
}

nlohmann::json MetricReport::to_json() const {
  using nlohmann::json;
  json per_case = json::array();
  for (const auto& c : cases) {
    json e{{"case_id", c.case_id}, {"violation_rate", c.violation}};
    for (int r = 0; r < 3; ++r) {
      const char* name = r == 0 ? "wt" : r == 1 ? "tc" : "et";
      e[std::string("dice_") + name] = c.dice[static_cast<std::size_t>(r)];
      e[std::string("hd95_") + name] = c.hd95[static_cast<std::size_t>(r)];
      e[std::string("hd95_") + name + "_empty_mismatch"] = c.hd95_sentinel[static_cast<std::size_t>(r)];
    }
    per_case.push_back(e);
  }
  const auto d = mean_dice();
  const auto h = mean_hd95();
  json agg{{"dice_wt", d[0]},   {"dice_tc", d[1]},       {"dice_et", d[2]},           {"dice_avg", avg_dice()},
           {"hd95_wt", h[0]},   {"hd95_tc", h[1]},       {"hd95_et", h[2]},           {"hd95_avg", avg_hd95()},
           {"violation_rate", mean_violation()},         {"hd95_sentinel_count", sentinel_count()},
           {"num_cases", cases.size()}};
  return json{{"cases", per_case},
              {"aggregate", agg},
              {"spacing", spacing},
              {"hd95_sentinel", "grid diagonal length, used when exactly one of prediction/ground truth is empty"}};
}

std::string MetricReport::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "case_id,dice_wt,dice_tc,dice_et,dice_avg,hd95_wt,hd95_tc,hd95_et,hd95_avg,violation_rate,hd95_sentinels\n";
  for (const auto& c : cases) {
    os << c.case_id;
    for (double v : c.dice) os << ',' << v;
    os << ',' << c.mean_dice();
    for (double v : c.hd95) os << ',' << v;
    os << ',' << c.mean_hd95() << ',' << c.violation << ','
       << (c.hd95_sentinel[0] + c.hd95_sentinel[1] + c.hd95_sentinel[2]) << '\n';
  }
  return os.str();
}

std::string MetricReport::summary_table() const {
  const auto d = mean_dice();
  const auto h = mean_hd95();
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "| Dice ET | Dice WT | Dice TC | Dice Avg | HD95 ET | HD95 WT | HD95 TC | HD95 Avg |\n"
                "|---|---|---|---|---|---|---|---|\n"
                "| %.1f | %.1f | %.1f | %.1f | %.2f | %.2f | %.2f | %.2f |\n",
                100 * d[2], 100 * d[0], 100 * d[1], 100 * avg_dice(), h[2], h[0], h[1], avg_hd95());
  return buf;
}

void MetricReport::write(const std::filesystem::path& json_path, const std::filesystem::path& csv_path) const {
  io::write_json(json_path, to_json());
  io::write_text(csv_path, to_csv());
}

template <typename T>
BranchLoss<T> segmentation_loss(const std::array<nn::Var<T>, 3>& logits, const Tensor<T>& labels,
                                const std::array<double, 3>& weights, bool pool_batch) {
  if (labels.rank() != 5 || labels.dim(1) != 3) throw ShapeError("segmentation_loss: labels must be [B, 3, D, H, W]");
  const Index b = labels.dim(0);
  const Index vox = labels.inner_size(1);
  BranchLoss<T> out;
  for (int s = 0; s < 3; ++s) {
    const auto& y = logits[static_cast<std::size_t>(s)];
    const Shape want{b, 1, labels.dim(2), labels.dim(3), labels.dim(4)};
    if (y.shape() != want)
      throw ShapeError("segmentation_loss: logits " + shape_str(y.shape()) + " do not match labels " + shape_str(labels.shape()));
    Tensor<T> target(want);
    for (Index bi = 0; bi < b; ++bi)
      std::copy_n(labels.data() + (bi * 3 + s) * vox, vox, target.data() + bi * vox);
    auto dl = pool_batch ? nn::soft_dice_loss(nn::reshape(y, Shape{1, b * vox}), target.reshaped(Shape{1, b * vox}), T(1e-5))
                         : nn::soft_dice_loss(y, target, T(1e-5));
    auto bl = nn::bce_with_logits(y, target);
    out.dice[static_cast<std::size_t>(s)] = static_cast<double>(dl.value()[0]);
    out.bce[static_cast<std::size_t>(s)] = static_cast<double>(bl.value()[0]);
    auto term = nn::scale(nn::add(dl, bl), static_cast<T>(weights[static_cast<std::size_t>(s)]));
    out.total = s == 0 ? term : nn::add(out.total, term);
  }
  return out;
}

template BranchLoss<float> segmentation_loss<float>(const std::array<nn::Var<float>, 3>&, const Tensor<float>&,
                                                    const std::array<double, 3>&, bool);
template BranchLoss<double> segmentation_loss<double>(const std::array<nn::Var<double>, 3>&, const Tensor<double>&,
                                                      const std::array<double, 3>&, bool);

}  // namespace textcsp::metrics
