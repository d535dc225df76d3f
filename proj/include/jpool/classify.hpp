#pragma once

// Linear classifier over descriptors and evaluation metrics.
//
// L2-regularized multinomial logistic regression, trained by full-batch gradient
// descent from W = 0. Every gradient is a combination of training descriptors, so the
// iterate is kept as W = A X (A: K x n) and the logits as A (X X^T); one step costs
// K n^2 instead of K n d. The step size 1 / (0.5 max_i |x_i|^2 + lambda) bounds the
// objective's curvature, so the objective never increases.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "jpool/error.hpp"
#include "jpool/jointmap.hpp"
#include "jpool/json_io.hpp"
#include "jpool/net3d/layers.hpp"
#include "jpool/tensor.hpp"
#include "jpool/tensor_io.hpp"

namespace jpool {

struct LinearModel {
  Matrix weight;              // K x d
  std::vector<double> bias;   // K
  double lambda = 0.0;

  std::size_t n_classes() const { return weight.rows(); }
  std::size_t dim() const { return weight.cols(); }
};

struct LinearOptions {
  double lambda = 1e-3;
  std::size_t max_epochs = 5000;
  double tol = 1e-6;    // stop once the objective moves by less than this in one step
  double lr = 0.0;      // 0 picks the curvature bound
  bool fit_bias = false;
  std::uint64_t seed = 0;  // fold assignment in cross-validation
};

struct LinearFit {
  LinearModel model;
  std::vector<double> objective;  // per step, starting with the value at W = 0
  std::size_t epochs = 0;
  bool converged = false;
};

namespace detail {

inline void check_training_set(const std::vector<std::vector<double>>& xs,
                               const std::vector<int>& ys) {
  if (xs.empty() || xs.size() != ys.size()) throw ShapeError("train_linear: descriptor/label count");
  const std::size_t d = xs.front().size();
  for (const auto& x : xs)
    if (x.size() != d || d == 0) throw ShapeError("train_linear: descriptors differ in length");
  for (int y : ys)
    if (y < 0) throw ConfigError("train_linear: negative label");
  const int k = *std::max_element(ys.begin(), ys.end()) + 1;
  std::vector<int> seen(static_cast<std::size_t>(k), 0);
  for (int y : ys) seen[static_cast<std::size_t>(y)] = 1;
  if (std::accumulate(seen.begin(), seen.end(), 0) < 2)
    throw ConfigError("train_linear: need at least two classes");
}

/// Softmax cross-entropy of one column of logits; fills probs.
inline double softmax_ce(const std::vector<double>& z, int y, std::vector<double>& probs) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (std::size_t k = 0; k < z.size(); ++k) s += std::exp(z[k] - m);
  const double lse = m + std::log(s);
  for (std::size_t k = 0; k < z.size(); ++k) probs[k] = std::exp(z[k] - lse);
  return lse - z[static_cast<std::size_t>(y)];
}

}  // namespace detail

inline LinearFit train_linear(const std::vector<std::vector<double>>& xs, const std::vector<int>& ys,
                              std::size_t n_classes, const LinearOptions& opt) {
  detail::check_training_set(xs, ys);
  const std::size_t n = xs.size(), d = xs.front().size(), K = n_classes;
  if (static_cast<std::size_t>(*std::max_element(ys.begin(), ys.end())) >= K)
    throw ConfigError("train_linear: label exceeds class count");
  if (!(opt.lambda >= 0.0)) throw ConfigError("train_linear: lambda must be >= 0");

  Matrix gram(n, n);
  double max_sq = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      double s = 0.0;
      for (std::size_t f = 0; f < d; ++f) s += xs[i][f] * xs[j][f];
      gram(i, j) = gram(j, i) = s;
      if (i == j) max_sq = std::max(max_sq, s + (opt.fit_bias ? 1.0 : 0.0));
    }
  const double lr = opt.lr > 0.0 ? opt.lr : 1.0 / (0.5 * max_sq + opt.lambda);
  const double inv_n = 1.0 / static_cast<double>(n);

  Matrix a(K, n);  // W = A X
  std::vector<double> b(K, 0.0);
  std::vector<double> z(K), probs(K);
  Matrix resid(K, n);

  auto evaluate = [&]() {
    const Matrix ag = matmul(a, gram);  // K x n: logits without bias
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < K; ++k) z[k] = ag(k, i) + b[k];
      loss += detail::softmax_ce(z, ys[i], probs);
      for (std::size_t k = 0; k < K; ++k)
        resid(k, i) = probs[k] - (static_cast<std::size_t>(ys[i]) == k ? 1.0 : 0.0);
    }
    double wnorm = 0.0;  // |W|^2 = sum_k a_k G a_k^T
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t i = 0; i < n; ++i) wnorm += a(k, i) * ag(k, i);
    return loss * inv_n + 0.5 * opt.lambda * wnorm;
  };

  LinearFit fit;
  fit.objective.push_back(evaluate());
  for (std::size_t epoch = 0; epoch < opt.max_epochs; ++epoch) {
    for (std::size_t k = 0; k < K; ++k) {
      double gb = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        a(k, i) -= lr * (resid(k, i) * inv_n + opt.lambda * a(k, i));
        gb += resid(k, i);
      }
      if (opt.fit_bias) b[k] -= lr * gb * inv_n;
    }
    const double f = evaluate();
    if (!std::isfinite(f)) throw DivergenceError("train_linear: objective became non-finite");
    fit.objective.push_back(f);
    fit.epochs = epoch + 1;
    if (std::abs(fit.objective[fit.objective.size() - 2] - f) < opt.tol) {
      fit.converged = true;
      break;
    }
  }

  fit.model.weight = Matrix(K, d);
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t i = 0; i < n; ++i) {
      const double c = a(k, i);
      if (c == 0.0) continue;
      for (std::size_t f = 0; f < d; ++f) fit.model.weight(k, f) += c * xs[i][f];
    }
  fit.model.bias = b;
  fit.model.lambda = opt.lambda;
  return fit;
}

inline std::vector<double> predict_logits(const LinearModel& m, const std::vector<double>& x) {
  if (x.size() != m.dim())
    throw ShapeError("predict: descriptor length " + std::to_string(x.size()) + ", model expects " +
                     std::to_string(m.dim()));
  std::vector<double> z(m.n_classes());
  for (std::size_t k = 0; k < z.size(); ++k) {
    double s = 0.0;
    for (std::size_t f = 0; f < x.size(); ++f) s += m.weight(k, f) * x[f];
    z[k] = s + m.bias[k];
  }
  return z;
}

/// Class probabilities.
inline std::vector<double> predict_scores(const LinearModel& m, const std::vector<double>& x) {
  return net3d::softmax(predict_logits(m, x));
}

inline int argmax(const std::vector<double>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline int predict_label(const LinearModel& m, const std::vector<double>& x) {
  return argmax(predict_logits(m, x));
}

inline double accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
  if (preds.size() != labels.size() || preds.empty()) throw ShapeError("accuracy: length mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

using Confusion = std::vector<std::vector<std::size_t>>;

/// Rows are true classes, columns predicted classes.
inline Confusion confusion(const std::vector<int>& preds, const std::vector<int>& labels,
                           std::size_t n_classes) {
  if (preds.size() != labels.size()) throw ShapeError("confusion: length mismatch");
  Confusion c(n_classes, std::vector<std::size_t>(n_classes, 0));
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] < 0 || labels[i] < 0 || static_cast<std::size_t>(preds[i]) >= n_classes ||
        static_cast<std::size_t>(labels[i]) >= n_classes)
      throw ShapeError("confusion: class id out of range");
    ++c[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(preds[i])];
  }
  return c;
}

struct CvResult {
  double lambda = 0.0;
  std::vector<double> grid;
  std::vector<double> fold_accuracy;  // mean over folds, per grid entry
  std::vector<double> fold_loss;      // mean validation cross-entropy, per grid entry
};

/// Stratified folds: each class's indices are shuffled and dealt round-robin.
inline std::vector<std::size_t> stratified_folds(const std::vector<int>& ys, std::size_t k,
                                                 std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> fold(ys.size());
  const int hi = *std::max_element(ys.begin(), ys.end());
  for (int c = 0; c <= hi; ++c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < ys.size(); ++i)
      if (ys[i] == c) idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t j = 0; j < idx.size(); ++j) fold[idx[j]] = j % k;
  }
  return fold;
}

/// Picks lambda by k-fold accuracy; ties go to the lower validation cross-entropy.
inline CvResult select_lambda(const std::vector<std::vector<double>>& xs, const std::vector<int>& ys,
                              std::size_t n_classes, std::vector<double> grid, LinearOptions opt,
                              std::size_t k = 3) {
  if (grid.empty()) throw ConfigError("select_lambda: empty grid");
  detail::check_training_set(xs, ys);
  std::sort(grid.begin(), grid.end());
  const auto fold = stratified_folds(ys, k, opt.seed);
  CvResult r;
  r.grid = grid;
  double best_acc = -1.0, best_loss = 0.0;
  for (double lambda : grid) {
    opt.lambda = lambda;
    double acc = 0.0, loss = 0.0;
    std::size_t used = 0;
    for (std::size_t f = 0; f < k; ++f) {
      std::vector<std::vector<double>> tx, vx;
      std::vector<int> ty, vy;
      for (std::size_t i = 0; i < xs.size(); ++i) {
        (fold[i] == f ? vx : tx).push_back(xs[i]);
        (fold[i] == f ? vy : ty).push_back(ys[i]);
      }
      if (vx.empty() || std::set<int>(ty.begin(), ty.end()).size() < 2) continue;
      const LinearModel m = train_linear(tx, ty, n_classes, opt).model;
      std::vector<int> pred;
      double ce = 0.0;
      std::vector<double> probs(n_classes);
      for (std::size_t i = 0; i < vx.size(); ++i) {
        const auto z = predict_logits(m, vx[i]);
        pred.push_back(argmax(z));
        ce += detail::softmax_ce(z, vy[i], probs);
      }
      acc += accuracy(pred, vy);
      loss += ce / static_cast<double>(vx.size());
      ++used;
    }
    acc = used ? acc / static_cast<double>(used) : 0.0;
    loss = used ? loss / static_cast<double>(used) : 0.0;
    r.fold_accuracy.push_back(acc);
    r.fold_loss.push_back(loss);
    if (acc > best_acc || (acc == best_acc && loss < best_loss)) {
      best_acc = acc;
      best_loss = loss;
      r.lambda = lambda;
    }
  }
  return r;
}

inline std::vector<double> default_lambda_grid() { return {1e-5, 1e-4, 1e-3, 1e-2, 1e-1}; }

struct JointError {
  double l1_x = 0.0, l1_y = 0.0;
  double ratio_x = 0.0, ratio_y = 0.0;
  std::size_t count = 0;
};

/// Mean |dx|, |dy| over joints visible in the ground truth; ratios divide by the frame size.
inline JointError joint_error(const JointTrack& gt, const JointTrack& est, double width,
                              double height) {
  if (gt.n_joints() != est.n_joints() || gt.n_frames() != est.n_frames())
    throw ShapeError("joint_error: tracks differ in shape");
  JointError e;
  for (std::size_t t = 0; t < gt.n_frames(); ++t)
    for (std::size_t i = 0; i < gt.n_joints(); ++i) {
      if (!gt.at(i, t).visible) continue;
      e.l1_x += std::abs(est.at(i, t).x - gt.at(i, t).x);
      e.l1_y += std::abs(est.at(i, t).y - gt.at(i, t).y);
      ++e.count;
    }
  if (e.count) {
    e.l1_x /= static_cast<double>(e.count);
    e.l1_y /= static_cast<double>(e.count);
  }
  e.ratio_x = e.l1_x / width;
  e.ratio_y = e.l1_y / height;
  return e;
}

// Persistence: K x (d + 1) tensor (bias in the last column) plus a JSON sidecar.

inline void save_linear(const std::filesystem::path& path, const LinearModel& m) {
  Tensor t({m.n_classes(), m.dim() + 1});
  for (std::size_t k = 0; k < m.n_classes(); ++k) {
    for (std::size_t f = 0; f < m.dim(); ++f) t.at({k, f}) = m.weight(k, f);
    t.at({k, m.dim()}) = m.bias[k];
  }
  write_tensor(path, t);
  write_json_file(std::filesystem::path(path.string() + ".json"),
                  {{"lambda", m.lambda}, {"classes", m.n_classes()}, {"d", m.dim()}});
}

inline LinearModel load_linear(const std::filesystem::path& path) {
  const Tensor t = read_tensor(path);
  const auto side = std::filesystem::path(path.string() + ".json");
  const auto j = read_json_file(side);
  LinearModel m;
  const auto [k, d] = with_json_context(side, [&] {
    m.lambda = j.at("lambda").get<double>();
    return std::pair{j.at("classes").get<std::size_t>(), j.at("d").get<std::size_t>()};
  });
  if (t.rank() != 2 || t.dim(0) != k || t.dim(1) != d + 1)
    throw ParseError(path.string() + ": model tensor " + to_string(t.dims()) +
                     " disagrees with sidecar (classes " + std::to_string(k) + ", d " +
                     std::to_string(d) + ")");
  m.weight = Matrix(k, d);
  m.bias.assign(k, 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t f = 0; f < d; ++f) m.weight(c, f) = t.at({c, f});
    m.bias[c] = t.at({c, d});
  }
  return m;
}

// Prediction tables: CSV with header "id,label,pred,score_0,...".

struct PredictionRow {
  std::string id;
  int label = -1;
  int pred = -1;
  std::vector<double> scores;
};

inline void write_predictions_csv(const std::filesystem::path& path,
                                  const std::vector<PredictionRow>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  const std::size_t k = rows.empty() ? 0 : rows.front().scores.size();
  out << "id,label,pred";
  for (std::size_t c = 0; c < k; ++c) out << ",score_" << c;
  out << '\n';
  out.precision(17);
  for (const auto& r : rows) {
    out << r.id << ',' << r.label << ',' << r.pred;
    for (double s : r.scores) out << ',' << s;
    out << '\n';
  }
}

inline std::vector<PredictionRow> read_predictions_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string() + ": cannot open");
  std::string line;
  std::size_t offset = 0, lineno = 0;
  if (!std::getline(in, line) || line.rfind("id,label,pred", 0) != 0)
    throw ParseError(path.string() + ": offset 0: expected header id,label,pred");
  offset += line.size() + 1;
  std::vector<PredictionRow> rows;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t here = offset;
    offset += line.size() + 1;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() < 3)
      throw ParseError(path.string() + ": offset " + std::to_string(here) + ": expected id,label,pred");
    PredictionRow r;
    r.id = cells[0];
    try {
      r.label = std::stoi(cells[1]);
      r.pred = std::stoi(cells[2]);
      for (std::size_t c = 3; c < cells.size(); ++c) r.scores.push_back(std::stod(cells[c]));
    } catch (const std::exception&) {
      throw ParseError(path.string() + ": offset " + std::to_string(here) + ": bad number on row " +
                       std::to_string(lineno));
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace jpool
