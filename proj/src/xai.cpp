#include "microbia/xai.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <sstream>
#include <tuple>

#include "microbia/reports.hpp"

namespace microbia {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Layer outputs

LayerOutputs extract_layer_outputs(const ModelState& model, const SampleSet& samples, Tap tap,
                                   std::size_t batch_size) {
  if (tap == Tap::Input) throw ParameterError("extract_layer_outputs: Input is not a layer output");
  if (samples.size() == 0) throw DataError("extract_layer_outputs: empty split");
  if (batch_size == 0) throw ParameterError("extract_layer_outputs: batch_size must be positive");
  LayerOutputs out;
  out.labels = samples.labels;
  out.ids = samples.ids;
  out.scheme = samples.scheme;
  out.tap = tap;
  for (std::size_t begin = 0; begin < samples.size(); begin += batch_size) {
    const std::size_t end = std::min(samples.size(), begin + batch_size);
    std::vector<std::size_t> idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    const auto trace = forward_eval(model, samples.images.gather_batch(idx), tap);
    const Tensor& act = trace.tap(tap);
    const std::size_t width = act.size() / act.dim(0);
    if (begin == 0) out.features.resize(static_cast<Eigen::Index>(samples.size()),
                                        static_cast<Eigen::Index>(width));
    for (std::size_t b = 0; b < end - begin; ++b)
      for (std::size_t j = 0; j < width; ++j)
        out.features(static_cast<Eigen::Index>(begin + b), static_cast<Eigen::Index>(j)) =
            act[b * width + j];
  }
  return out;
}

// ---------------------------------------------------------------------------
// PCA

namespace {

void fix_sign(Eigen::Ref<Eigen::RowVectorXd> v) {
  Eigen::Index arg = 0;
  v.cwiseAbs().maxCoeff(&arg);
  if (v(arg) < 0) v = -v;
}

}  // namespace

PcaResult pca_embed(const MatrixD& features, std::size_t k) {
  const auto n = features.rows(), d = features.cols();
  const auto kk = static_cast<Eigen::Index>(k);
  if (k == 0) throw ParameterError("pca_embed: k must be positive");
  if (n < 2) throw ParameterError("pca_embed: need at least 2 samples");
  if (d < kk) throw ParameterError("pca_embed: fewer feature dimensions than components");
  if (!features.allFinite()) throw NumericError("pca_embed: non-finite features");

  PcaResult r;
  r.mean = features.colwise().mean().transpose();
  const MatrixD centred = features.rowwise() - r.mean.transpose();
  const double denom = static_cast<double>(n - 1);
  r.components = MatrixD::Zero(kk, d);
  r.eigenvalues = VectorD::Zero(kk);

  // Covariance eigenproblem when D <= N, otherwise the dual Gram problem.
  const bool primal = d <= n;
  const Eigen::MatrixXd m = primal ? Eigen::MatrixXd(centred.transpose() * centred / denom)
                                   : Eigen::MatrixXd(centred * centred.transpose() / denom);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  if (es.info() != Eigen::Success) throw NumericError("pca_embed: eigensolver failed");
  const auto size = m.rows();
  const double top = std::max(es.eigenvalues()(size - 1), 0.0);
  const double tol = top * 1e-12;
  for (Eigen::Index i = 0; i < kk && i < size; ++i) {
    const double lambda = es.eigenvalues()(size - 1 - i);
    if (!(lambda > tol) || top == 0.0) {
      r.degenerate = true;
      continue;
    }
    r.eigenvalues(i) = lambda;
    if (primal) {
      r.components.row(i) = es.eigenvectors().col(size - 1 - i).transpose();
    } else {
      const VectorD v = centred.transpose() * es.eigenvectors().col(size - 1 - i);
      r.components.row(i) = (v / v.norm()).transpose();
    }
    fix_sign(r.components.row(i));
  }
  if (kk > size) r.degenerate = true;

  const MatrixD projected = centred * r.components.transpose();
  r.embedding.points = MatrixD::Zero(n, 2);
  r.embedding.points.leftCols(std::min<Eigen::Index>(kk, 2)) =
      projected.leftCols(std::min<Eigen::Index>(kk, 2));
  r.embedding.method = EmbedMethod::Pca;
  return r;
}

// ---------------------------------------------------------------------------
// t-SNE

double tsne_learning_rate(std::size_t n) { return std::max(50.0, static_cast<double>(n) / 48.0); }

namespace {

MatrixD squared_distances(const MatrixD& x) {
  const VectorD sq = x.rowwise().squaredNorm();
  MatrixD d = (-2.0 * x * x.transpose()).rowwise() + sq.transpose();
  d.colwise() += sq;
  d = d.cwiseMax(0.0);
  d.diagonal().setZero();
  return d;
}

}  // namespace

ConditionalP conditional_probabilities(const MatrixD& features, double perplexity) {
  const auto n = features.rows();
  if (!(perplexity > 0.0)) throw ParameterError("t-SNE: perplexity must be positive");
  if (!(static_cast<double>(n) > 3.0 * perplexity))
    throw ParameterError("t-SNE: perplexity " + format_number(perplexity) + " needs more than " +
                         format_number(3.0 * perplexity) + " samples, got " + std::to_string(n));
  if (!features.allFinite()) throw NumericError("t-SNE: non-finite features");
  const MatrixD d2 = squared_distances(features);
  const double target = std::log(perplexity);

  ConditionalP out;
  out.p = MatrixD::Zero(n, n);
  out.beta = VectorD::Ones(n);
  out.row_perplexity = VectorD::Zero(n);
  std::vector<double> row(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    double dmin = INFINITY;
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) dmin = std::min(dmin, d2(i, j));
    double beta = 1.0, lo = 0.0, hi = INFINITY, entropy = 0.0;
    for (int it = 0; it < 200; ++it) {
      double sum = 0.0, weighted = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (j == i) {
          row[static_cast<std::size_t>(j)] = 0.0;
          continue;
        }
        const double shifted = d2(i, j) - dmin;
        const double v = std::exp(-beta * shifted);
        row[static_cast<std::size_t>(j)] = v;
        sum += v;
        weighted += shifted * v;
      }
      entropy = std::log(sum) + beta * weighted / sum;
      for (auto& v : row) v /= sum;
      const double diff = entropy - target;
      if (std::abs(diff) < 1e-10) break;
      if (diff > 0) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
      } else {
        hi = beta;
        beta = 0.5 * (beta + lo);
      }
    }
    for (Eigen::Index j = 0; j < n; ++j) out.p(i, j) = row[static_cast<std::size_t>(j)];
    out.beta(i) = beta;
    out.row_perplexity(i) = std::exp(entropy);
  }
  return out;
}

MatrixD joint_probabilities(const ConditionalP& conditional) {
  const auto n = conditional.p.rows();
  MatrixD p(n, n);
  const double scale = 1.0 / (2.0 * static_cast<double>(n));
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      p(i, j) = (conditional.p(i, j) + conditional.p(j, i)) * scale;
  return p;
}

namespace {

// Student-t kernel values (zero diagonal) and their sum.
double student_kernel(const MatrixD& y, MatrixD& num) {
  const auto n = y.rows();
  double z = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    num(i, i) = 0.0;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double dx = y(i, 0) - y(j, 0), dy = y(i, 1) - y(j, 1);
      const double v = 1.0 / (1.0 + dx * dx + dy * dy);
      num(i, j) = num(j, i) = v;
      z += 2.0 * v;
    }
  }
  return z;
}

double kl_divergence(const MatrixD& p, const MatrixD& num, double z) {
  double kl = 0.0;
  const auto n = p.rows();
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      const double pij = p(i, j);
      if (i == j || pij <= 0.0) continue;
      const double q = std::max(num(i, j) / z, 1e-300);
      kl += pij * std::log(pij / q);
    }
  return kl;
}

}  // namespace

TsneResult tsne_embed(const MatrixD& features, const TsneConfig& config) {
  const auto n = features.rows();
  if (config.iterations == 0) throw ParameterError("t-SNE: iterations must be positive");
  if (config.log_every == 0) throw ParameterError("t-SNE: log_every must be positive");
  const MatrixD p = joint_probabilities(conditional_probabilities(features, config.perplexity));
  const double lr = config.learning_rate.value_or(tsne_learning_rate(static_cast<std::size_t>(n)));
  if (!(lr > 0.0)) throw ParameterError("t-SNE: learning rate must be positive");

  MatrixD y(n, 2);
  if (config.pca_init) {
    const auto pca = pca_embed(features, 2);
    y = pca.embedding.points;
    const double sd = std::sqrt((y.col(0).array() - y.col(0).mean()).square().sum() /
                                static_cast<double>(std::max<Eigen::Index>(n - 1, 1)));
    if (sd > 0) y *= config.init_stddev / sd;
  } else {
    Rng rng(config.seed);
    for (Eigen::Index i = 0; i < n; ++i)
      for (int c = 0; c < 2; ++c) y(i, c) = rng.normal(0.0, config.init_stddev);
  }

  MatrixD update = MatrixD::Zero(n, 2), gains = MatrixD::Ones(n, 2), grad(n, 2), num(n, n);
  TsneResult result;
  for (std::size_t it = 0; it < config.iterations; ++it) {
    const double exaggeration = it < config.exaggeration_iterations ? config.early_exaggeration : 1.0;
    const double momentum = it < config.momentum_switch ? config.initial_momentum
                                                        : config.final_momentum;
    const double z = student_kernel(y, num);
    grad.setZero();
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = i + 1; j < n; ++j) {
        const double w = num(i, j);
        const double f = 4.0 * (exaggeration * p(i, j) - w / z) * w;
        const double gx = f * (y(i, 0) - y(j, 0)), gy = f * (y(i, 1) - y(j, 1));
        grad(i, 0) += gx, grad(i, 1) += gy;
        grad(j, 0) -= gx, grad(j, 1) -= gy;
      }
    }
    for (Eigen::Index i = 0; i < n; ++i)
      for (int c = 0; c < 2; ++c) {
        double& g = gains(i, c);
        g = ((grad(i, c) > 0) != (update(i, c) > 0)) ? g + 0.2 : g * 0.8;
        g = std::max(g, 0.01);
        update(i, c) = momentum * update(i, c) - lr * g * grad(i, c);
        y(i, c) += update(i, c);
      }
    y.rowwise() -= y.colwise().mean();
    if (!y.allFinite())
      throw NumericError("t-SNE diverged at iteration " + std::to_string(it + 1));
    const std::size_t done = it + 1;
    if (done % config.log_every == 0 || done == config.iterations) {
      const double zz = student_kernel(y, num);
      result.kl_log.push_back({done, kl_divergence(p, num, zz)});
    }
  }
  result.embedding.points = y;
  result.embedding.method = EmbedMethod::Tsne;
  result.embedding.perplexity = config.perplexity;
  result.embedding.iterations = config.iterations;
  result.embedding.learning_rate = lr;
  result.embedding.seed = config.seed;
  return result;
}

// ---------------------------------------------------------------------------
// Activation maximisation

FeatureVizResult feature_visualize(const ModelState& model, std::size_t layer, std::size_t kernel,
                                   const FeatureVizConfig& config) {
  if (model.mode != Mode::Eval) throw StateError("feature_visualize: model must be in eval mode");
  if (layer >= 4) throw ParameterError("feature_visualize: conv layer index must be 0..3");
  if (kernel >= model.arch.channels[layer])
    throw ParameterError("feature_visualize: layer " + std::to_string(layer + 1) + " has " +
                         std::to_string(model.arch.channels[layer]) + " kernels");
  if (config.images == 0) throw ParameterError("feature_visualize: images must be positive");
  if (!(config.step > 0.0)) throw ParameterError("feature_visualize: step must be positive");

  const std::size_t s = model.arch.input_size, n = config.images, per = 3 * s * s;
  const Tap tap = conv_tap(layer);
  Tensor x({n, 3, s, s});
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = Rng(config.seed).fork(i);
    for (std::size_t j = 0; j < per; ++j)
      x[i * per + j] = static_cast<float>(rng.normal(0.0, config.init_stddev));
  }

  FeatureVizResult r;
  r.layer = layer;
  r.kernel = kernel;
  r.objective.assign(n, {});
  bool any_gradient = false;
  for (std::size_t it = 0;; ++it) {
    const auto trace = forward_eval(model, x, tap);
    const Tensor& act = trace.tap(tap);
    const std::size_t k = act.dim(1), area = act.dim(2) * act.dim(3);
    for (std::size_t i = 0; i < n; ++i) {
      const float* m = act.data() + (i * k + kernel) * area;
      double sum = 0.0;
      for (std::size_t j = 0; j < area; ++j) sum += m[j];
      r.objective[i].push_back(sum / static_cast<double>(area));
    }
    if (it == config.iterations) break;
    Tensor upstream(act.shape());
    const float unit = 1.0f / static_cast<float>(area);
    for (std::size_t i = 0; i < n; ++i)
      std::fill_n(upstream.data() + (i * k + kernel) * area, area, unit);
    const Tensor g = backward(model, trace, upstream, tap, Tap::Input, false).grad;
    for (std::size_t i = 0; i < n; ++i) {
      const float* gi = g.data() + i * per;
      double sq = 0.0;
      for (std::size_t j = 0; j < per; ++j) sq += static_cast<double>(gi[j]) * gi[j];
      const double rms = std::sqrt(sq / static_cast<double>(per));
      if (!(rms > 0.0)) continue;
      any_gradient = true;
      const auto scale = static_cast<float>(config.step / rms);
      float* xi = x.data() + i * per;
      for (std::size_t j = 0; j < per; ++j) xi[j] += scale * gi[j];
    }
  }
  r.dead = !any_gradient;
  for (std::size_t i = 0; i < n; ++i) r.images.push_back(x.slice_batch(i).reshaped({3, s, s}));
  return r;
}

// ---------------------------------------------------------------------------
// Class activation maps

std::string_view cam_method_name(CamMethod method) {
  switch (method) {
    case CamMethod::GradCam: return "gradcam";
    case CamMethod::GradCamPlusPlus: return "gradcampp";
    case CamMethod::HiResCam: return "hirescam";
    case CamMethod::XGradCam: return "xgradcam";
    case CamMethod::EigenCam: return "eigencam";
    case CamMethod::EigenGradCam: return "eigengradcam";
  }
  throw ParameterError("unknown CAM method");
}

CamMethod parse_cam_method(std::string_view name) {
  for (CamMethod m : kAllCamMethods)
    if (cam_method_name(m) == name) return m;
  throw ParameterError("unknown CAM method '" + std::string(name) + "'");
}

namespace {

constexpr double kCamEps = 1e-7;

// Weighted channel sum followed by ReLU.
TensorD weighted_sum(const TensorD& a, const std::vector<double>& w) {
  const std::size_t k = a.dim(0), h = a.dim(1), wd = a.dim(2), area = h * wd;
  TensorD map({h, wd});
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t j = 0; j < area; ++j) map[j] += w[c] * a[c * area + j];
  for (auto& v : map.values()) v = std::max(v, 0.0);
  return map;
}

// Projection of the (HW x K) matrix onto its first right singular vector.
TensorD first_component(const TensorD& a) {
  const std::size_t k = a.dim(0), h = a.dim(1), wd = a.dim(2), area = h * wd;
  Eigen::MatrixXd m(area, k);
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t j = 0; j < area; ++j) m(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c)) = a[c * area + j];
  TensorD map({h, wd});
  if (m.cwiseAbs().maxCoeff() == 0.0) return map;
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinV);
  const Eigen::VectorXd proj = m * svd.matrixV().col(0);
  Eigen::Index arg = 0;
  proj.cwiseAbs().maxCoeff(&arg);
  const double sign = proj(arg) < 0 ? -1.0 : 1.0;
  for (std::size_t j = 0; j < area; ++j) map[j] = sign * proj(static_cast<Eigen::Index>(j));
  return map;
}

}  // namespace

TensorD cam_from_maps(const TensorD& activations, const TensorD& gradients, CamMethod method) {
  if (activations.rank() != 3) throw DimensionError("CAM: activations must be K x H x W");
  if (gradients.shape() != activations.shape())
    throw DimensionError("CAM: gradients " + shape_string(gradients.shape()) +
                         " do not match activations " + shape_string(activations.shape()));
  const std::size_t k = activations.dim(0), area = activations.dim(1) * activations.dim(2);
  const TensorD& a = activations;
  const TensorD& g = gradients;
  std::vector<double> w(k, 0.0);
  switch (method) {
    case CamMethod::GradCam:
      for (std::size_t c = 0; c < k; ++c) {
        double sum = 0.0;
        for (std::size_t j = 0; j < area; ++j) sum += g[c * area + j];
        w[c] = sum / static_cast<double>(area);
      }
      return weighted_sum(a, w);
    case CamMethod::HiResCam: {
      TensorD map({activations.dim(1), activations.dim(2)});
      for (std::size_t c = 0; c < k; ++c)
        for (std::size_t j = 0; j < area; ++j) map[j] += g[c * area + j] * a[c * area + j];
      for (auto& v : map.values()) v = std::max(v, 0.0);
      return map;
    }
    case CamMethod::XGradCam:
      for (std::size_t c = 0; c < k; ++c) {
        double num = 0.0, den = 0.0;
        for (std::size_t j = 0; j < area; ++j) {
          num += g[c * area + j] * a[c * area + j];
          den += a[c * area + j];
        }
        w[c] = num / (den + kCamEps);
      }
      return weighted_sum(a, w);
    case CamMethod::GradCamPlusPlus:
      for (std::size_t c = 0; c < k; ++c) {
        double sum_a = 0.0;
        for (std::size_t j = 0; j < area; ++j) sum_a += a[c * area + j];
        for (std::size_t j = 0; j < area; ++j) {
          const double gj = g[c * area + j];
          if (gj == 0.0) continue;
          const double g2 = gj * gj, g3 = g2 * gj;
          const double alpha = g2 / (2.0 * g2 + sum_a * g3 + kCamEps);
          w[c] += alpha * std::max(gj, 0.0);
        }
      }
      return weighted_sum(a, w);
    case CamMethod::EigenCam:
      return first_component(a);
    case CamMethod::EigenGradCam: {
      TensorD ga = a;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= g[i];
      return first_component(ga);
    }
  }
  throw ParameterError("unknown CAM method");
}

TensorD minmax_normalize(const TensorD& map) {
  TensorD out(map.shape());
  const auto [lo, hi] = std::minmax_element(map.values().begin(), map.values().end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = (map[i] - *lo) / range;
  return out;
}

TensorD upsample_bilinear(const TensorD& map, std::size_t size) {
  if (map.rank() != 2) throw DimensionError("upsample: map must be H x W");
  if (size == 0) throw ParameterError("upsample: size must be positive");
  const std::size_t ih = map.dim(0), iw = map.dim(1);
  TensorD out({size, size});
  const auto source = [](std::size_t dst, double scale, std::size_t extent) {
    double s = (static_cast<double>(dst) + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(extent - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(s));
    const std::size_t i1 = std::min(i0 + 1, extent - 1);
    return std::tuple{i0, i1, s - static_cast<double>(i0)};
  };
  const double sy = static_cast<double>(ih) / static_cast<double>(size);
  const double sx = static_cast<double>(iw) / static_cast<double>(size);
  for (std::size_t y = 0; y < size; ++y) {
    const auto [y0, y1, wy] = source(y, sy, ih);
    for (std::size_t x = 0; x < size; ++x) {
      const auto [x0, x1, wx] = source(x, sx, iw);
      const double top = map[y0 * iw + x0] + (map[y0 * iw + x1] - map[y0 * iw + x0]) * wx;
      const double bottom = map[y1 * iw + x0] + (map[y1 * iw + x1] - map[y1 * iw + x0]) * wx;
      out[y * size + x] = top + (bottom - top) * wy;
    }
  }
  return out;
}

ActivationMap cam(const ModelState& model, const Tensor& image, std::size_t class_index,
                  CamMethod method, Tap tap) {
  if (tap != Tap::Conv1Out && tap != Tap::Conv2Out && tap != Tap::Conv3Out && tap != Tap::Conv4Out)
    throw ParameterError("CAM: tap must be a convolutional output");
  if (class_index >= model.num_outputs())
    throw ParameterError("CAM: class index " + std::to_string(class_index) + " out of range");
  const std::size_t s = model.arch.input_size;
  if (image.size() != 3 * s * s)
    throw DimensionError("CAM: image must be 3 x " + std::to_string(s) + " x " + std::to_string(s));
  const Tensor batch = image.reshaped({1, 3, s, s});
  const Tensor act = forward_eval(model, batch, tap).tap(tap);
  const Shape maps(act.shape().begin() + 1, act.shape().end());
  const TensorD a = act.cast<double>().reshaped(maps);
  const bool needs_grad = method != CamMethod::EigenCam;
  const TensorD g = needs_grad ? class_score_gradient(model, batch, class_index, tap).cast<double>()
                               : TensorD(maps);

  ActivationMap r;
  r.method = method;
  r.class_index = class_index;
  r.tap = tap;
  r.raw = cam_from_maps(a, g, method);
  r.heat = minmax_normalize(r.raw);
  r.upsampled = upsample_bilinear(r.heat, s);
  return r;
}

// ---------------------------------------------------------------------------
// Export

std::string_view class_color(int index) {
  static constexpr std::string_view kColors[] = {"#7f7f7f", "#1f77b4", "#ff7f0e", "#2ca02c",
                                                 "#d62728", "#9467bd", "#8c564b"};
  if (index < 0 || index >= 7) throw LabelError("no colour for class " + std::to_string(index));
  return kColors[index];
}

void write_embedding_csv(const fs::path& path, const Embedding2D& e) {
  if (static_cast<std::size_t>(e.points.rows()) != e.labels.size())
    throw DimensionError("embedding: point and label counts differ");
  std::ostringstream s;
  s << "x,y,label\n";
  for (Eigen::Index i = 0; i < e.points.rows(); ++i)
    s << format_number(e.points(i, 0)) << ',' << format_number(e.points(i, 1)) << ','
      << label_word(e.scheme, e.labels[static_cast<std::size_t>(i)]) << '\n';
  write_text(path, s.str());
}

void write_embedding_svg(const fs::path& path, const Embedding2D& e, const std::string& title) {
  if (static_cast<std::size_t>(e.points.rows()) != e.labels.size())
    throw DimensionError("embedding: point and label counts differ");
  const double w = 640, h = 560, left = 30, right = 490, top = 45, bottom = h - 30;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (e.points.rows() > 0) {
    x0 = e.points.col(0).minCoeff(), x1 = e.points.col(0).maxCoeff();
    y0 = e.points.col(1).minCoeff(), y1 = e.points.col(1).maxCoeff();
  }
  if (x1 - x0 < 1e-12) x0 -= 0.5, x1 += 0.5;
  if (y1 - y0 < 1e-12) y0 -= 0.5, y1 += 0.5;
  char buf[160];
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"560\" viewBox=\"0 0 640 "
       "560\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::string safe_title;
  for (char c : title) safe_title += (c == '<' || c == '>' || c == '&') ? ' ' : c;
  s << "<text x=\"320\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" << safe_title
    << "</text>\n";
  std::snprintf(buf, sizeof buf,
                "<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" fill=\"none\" "
                "stroke=\"#444\"/>\n",
                left, top, right - left, bottom - top);
  s << buf;
  for (Eigen::Index i = 0; i < e.points.rows(); ++i) {
    const double px = left + 5 + (e.points(i, 0) - x0) / (x1 - x0) * (right - left - 10);
    const double py = bottom - 5 - (e.points(i, 1) - y0) / (y1 - y0) * (bottom - top - 10);
    const int label = e.labels[static_cast<std::size_t>(i)];
    std::snprintf(buf, sizeof buf,
                  "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"2.5\" fill=\"%s\" fill-opacity=\"0.75\"/>\n",
                  px, py, std::string(class_color(label)).c_str());
    s << buf;
  }
  for (std::size_t c = 0; c < num_classes(e.scheme); ++c) {
    const double ly = top + 12 + 20 * static_cast<double>(c);
    std::snprintf(buf, sizeof buf,
                  "<circle cx=\"510\" cy=\"%.1f\" r=\"5\" fill=\"%s\"/>\n<text x=\"522\" "
                  "y=\"%.1f\" font-size=\"12\">",
                  ly, std::string(class_color(static_cast<int>(c))).c_str(), ly + 4);
    s << buf << label_display_name(e.scheme, static_cast<int>(c)) << "</text>\n";
  }
  s << "</svg>\n";
  write_text(path, s.str());
}

Image8 tensor_to_image(const Tensor& image, const std::optional<ChannelStats>& normalization) {
  if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("expected a 3 x H x W image");
  const std::size_t h = image.dim(1), w = image.dim(2);
  Image8 out(h, w, 3);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double v = image[(c * h + y) * w + x];
        if (normalization) v = v * normalization->stddev[c] + normalization->mean[c];
        out.at(y, x, c) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
  return out;
}

Image8 heat_to_gray(const TensorD& heat) {
  if (heat.rank() != 2) throw DimensionError("heat map must be H x W");
  Image8 out(heat.dim(0), heat.dim(1), 1);
  for (std::size_t i = 0; i < heat.size(); ++i)
    out.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(heat[i], 0.0, 1.0) * 255.0));
  return out;
}

namespace {

std::array<double, 3> jet(double v) {
  v = std::clamp(v, 0.0, 1.0);
  const auto ch = [v](double centre) { return std::clamp(1.5 - std::abs(4.0 * v - centre), 0.0, 1.0); };
  return {ch(3.0), ch(2.0), ch(1.0)};
}

}  // namespace

Image8 heat_overlay(const Image8& image, const TensorD& heat, double alpha) {
  if (image.channels != 3 || heat.rank() != 2 || heat.dim(0) != image.height ||
      heat.dim(1) != image.width)
    throw DimensionError("overlay: heat map and image sizes differ");
  Image8 out = image;
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x) {
      const auto rgb = jet(heat[y * image.width + x]);
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = (1.0 - alpha) * image.at(y, x, c) + alpha * 255.0 * rgb[c];
        out.at(y, x, c) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
    }
  return out;
}

std::vector<fs::path> write_feature_viz(const fs::path& dir, const FeatureVizResult& result,
                                        const std::optional<ChannelStats>& normalization) {
  fs::create_directories(dir);
  std::vector<fs::path> paths;
  for (std::size_t i = 0; i < result.images.size(); ++i) {
    const fs::path p = dir / ("layer" + std::to_string(result.layer + 1) + "_kernel" +
                              std::to_string(result.kernel) + "_img" + std::to_string(i) + ".ppm");
    write_ppm(p, tensor_to_image(result.images[i], normalization));
    paths.push_back(p);
  }
  return paths;
}

}  // namespace microbia
