#include "racnet/lrp.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "racnet/serialize.hpp"

namespace racnet {

namespace {

// Per-output-element redistribution coefficients. kp multiplies z+/1,
// kn multiplies z-/1 (both already divided by their pool sums). When exactly
// one pool is empty the whole relevance flows through the other pool scaled
// by (alpha - beta), which keeps redistribution proportional on single-sign
// layers (and conserving when alpha - beta = 1).
void pool_coefficients(double s_pos, double s_neg, double r, const LrpParams& p,
                       double& kp, double& kn) {
  const bool pos_empty = s_pos == 0.0;
  const bool neg_empty = s_neg == 0.0;
  const double gamma = p.alpha - p.beta;
  kp = 0.0;
  kn = 0.0;
  if (pos_empty && neg_empty) return;
  const double sp = (s_pos < p.stabilizer_eps) ? p.stabilizer_eps : s_pos;
  const double sn = (s_neg > -p.stabilizer_eps) ? -p.stabilizer_eps : s_neg;
  if (neg_empty) {
    kp = gamma * r / sp;
  } else if (pos_empty) {
    kn = gamma * r / sn;
  } else {
    kp = p.alpha * r / sp;
    kn = -p.beta * r / sn;
  }
}

Tensor lrp_dense(const Dense& d, const Tensor& input, const Tensor& upper,
                 const LrpParams& p) {
  const Eigen::VectorXd ap = input.data.cwiseMax(0.0);
  const Eigen::VectorXd an = input.data.cwiseMin(0.0);
  const Eigen::MatrixXd wp = d.weight.cwiseMax(0.0);
  const Eigen::MatrixXd wn = d.weight.cwiseMin(0.0);
  const Eigen::VectorXd s_pos = wp * ap + wn * an + d.bias.cwiseMax(0.0);
  const Eigen::VectorXd s_neg = wn * ap + wp * an + d.bias.cwiseMin(0.0);
  Eigen::VectorXd kp(upper.size()), kn(upper.size());
  for (Index q = 0; q < upper.size(); ++q)
    pool_coefficients(s_pos[q], s_neg[q], upper.data[q], p, kp[q], kn[q]);
  Eigen::VectorXd r = ap.cwiseProduct(wp.transpose() * kp + wn.transpose() * kn) +
                      an.cwiseProduct(wn.transpose() * kp + wp.transpose() * kn);
  return Tensor(input.shape, std::move(r));
}

// Conv without bias on an explicit weight matrix.
Eigen::MatrixXd conv_nobias(const Conv2d& c, const Eigen::MatrixXd& w,
                            const Eigen::MatrixXd& cols) {
  return w * cols;
}

Tensor lrp_conv(const Conv2d& c, const Tensor& input, const Tensor& upper,
                const LrpParams& p) {
  const Shape os = output_shape(Layer{c}, input.shape);
  if (!same_shape(os, upper.shape))
    throw std::invalid_argument("lrp_step: upper relevance shape mismatch");
  const Index HW = os[1] * os[2];

  Tensor xp(input.shape, input.data.cwiseMax(0.0));
  Tensor xn(input.shape, input.data.cwiseMin(0.0));
  const Eigen::MatrixXd cols_p = im2col(xp, c.ksize, c.stride, c.pad);
  const Eigen::MatrixXd cols_n = im2col(xn, c.ksize, c.stride, c.pad);
  const Eigen::MatrixXd wp = c.weight.cwiseMax(0.0);
  const Eigen::MatrixXd wn = c.weight.cwiseMin(0.0);

  const Eigen::MatrixXd s_pos_m = conv_nobias(c, wp, cols_p) + conv_nobias(c, wn, cols_n);
  const Eigen::MatrixXd s_neg_m = conv_nobias(c, wn, cols_p) + conv_nobias(c, wp, cols_n);

  Eigen::MatrixXd kp(c.out_ch, HW), kn(c.out_ch, HW);
  for (Index co = 0; co < c.out_ch; ++co) {
    const double bp = std::max(c.bias[co], 0.0);
    const double bn_ = std::min(c.bias[co], 0.0);
    for (Index j = 0; j < HW; ++j)
      pool_coefficients(s_pos_m(co, j) + bp, s_neg_m(co, j) + bn_,
                        upper.data[co * HW + j], p, kp(co, j), kn(co, j));
  }

  const Tensor t_pp = col2im(wp.transpose() * kp, input.shape, c.ksize, c.stride, c.pad);
  const Tensor t_np = col2im(wn.transpose() * kp, input.shape, c.ksize, c.stride, c.pad);
  const Tensor t_pn = col2im(wp.transpose() * kn, input.shape, c.ksize, c.stride, c.pad);
  const Tensor t_nn = col2im(wn.transpose() * kn, input.shape, c.ksize, c.stride, c.pad);

  Tensor r(input.shape);
  r.data = xp.data.cwiseProduct(t_pp.data + t_nn.data) +
           xn.data.cwiseProduct(t_np.data + t_pn.data);
  return r;
}

Tensor lrp_maxpool(const MaxPool& mp, const Tensor& input, const Tensor& upper) {
  const Index C = input.shape[0], H = input.shape[1], W = input.shape[2];
  const Index Ho = upper.shape[1], Wo = upper.shape[2];
  Tensor r(input.shape);
  for (Index c = 0; c < C; ++c)
    for (Index oy = 0; oy < Ho; ++oy)
      for (Index ox = 0; ox < Wo; ++ox) {
        Index best = -1;
        double bv = -std::numeric_limits<double>::infinity();
        for (Index ky = 0; ky < mp.ksize; ++ky)
          for (Index kx = 0; kx < mp.ksize; ++kx) {
            const Index idx = (c * H + oy * mp.stride + ky) * W + ox * mp.stride + kx;
            if (input.data[idx] > bv) {
              bv = input.data[idx];
              best = idx;
            }
          }
        r.data[best] += upper.data[(c * Ho + oy) * Wo + ox];
      }
  return r;
}

Tensor lrp_avgpool(const AvgPool& ap, const Tensor& input, const Tensor& upper,
                   const LrpParams& p) {
  const Index C = input.shape[0], H = input.shape[1], W = input.shape[2];
  const Index Ho = upper.shape[1], Wo = upper.shape[2];
  const double inv = 1.0 / double(ap.ksize * ap.ksize);
  Tensor r(input.shape);
  for (Index c = 0; c < C; ++c)
    for (Index oy = 0; oy < Ho; ++oy)
      for (Index ox = 0; ox < Wo; ++ox) {
        double s_pos = 0.0, s_neg = 0.0;
        for (Index ky = 0; ky < ap.ksize; ++ky)
          for (Index kx = 0; kx < ap.ksize; ++kx) {
            const double z =
                input.data[(c * H + oy * ap.stride + ky) * W + ox * ap.stride + kx] * inv;
            (z > 0 ? s_pos : s_neg) += z;
          }
        double kp, kn;
        pool_coefficients(s_pos, s_neg, upper.data[(c * Ho + oy) * Wo + ox], p, kp, kn);
        for (Index ky = 0; ky < ap.ksize; ++ky)
          for (Index kx = 0; kx < ap.ksize; ++kx) {
            const Index idx = (c * H + oy * ap.stride + ky) * W + ox * ap.stride + kx;
            const double z = input.data[idx] * inv;
            r.data[idx] += z > 0 ? z * kp : z * kn;
          }
      }
  return r;
}

}  // namespace

void validate(const LrpParams& p) {
  if (std::abs(p.alpha - p.beta - 1.0) > 1e-12)
    throw std::invalid_argument("lrp: alpha - beta must equal 1");
  if (p.stabilizer_eps < 0) throw std::invalid_argument("lrp: negative stabilizer");
}

Eigen::VectorXd output_relevance(int true_label, int num_classes) {
  if (true_label < 0 || true_label >= num_classes)
    throw std::out_of_range("output_relevance: label " + std::to_string(true_label) +
                            " out of range for " + std::to_string(num_classes) +
                            " classes");
  Eigen::VectorXd r = Eigen::VectorXd::Zero(num_classes);
  r[true_label] = 1.0;
  return r;
}

Conv2d fold_batchnorm(const Conv2d& conv, const BatchNorm& bn) {
  Conv2d out = conv;
  for (Index co = 0; co < conv.out_ch; ++co) {
    const double scale = bn.gamma[co] / std::sqrt(bn.running_var[co] + bn.eps);
    out.weight.row(co) *= scale;
    out.bias[co] = scale * (conv.bias[co] - bn.running_mean[co]) + bn.beta[co];
  }
  return out;
}

Tensor lrp_step(const Layer& layer, const Tensor& input, const Tensor& upper_relevance,
                const LrpParams& params) {
  validate(params);
  const Shape os = output_shape(layer, input.shape);
  if (!same_shape(os, upper_relevance.shape))
    throw std::invalid_argument("lrp_step: upper relevance shape " +
                                shape_str(upper_relevance.shape) + " != layer output " +
                                shape_str(os));
  if (const auto* d = std::get_if<Dense>(&layer))
    return lrp_dense(*d, input, upper_relevance, params);
  if (const auto* c = std::get_if<Conv2d>(&layer))
    return lrp_conv(*c, input, upper_relevance, params);
  if (const auto* mp = std::get_if<MaxPool>(&layer))
    return lrp_maxpool(*mp, input, upper_relevance);
  if (const auto* ap = std::get_if<AvgPool>(&layer))
    return lrp_avgpool(*ap, input, upper_relevance, params);
  if (std::holds_alternative<Relu>(layer))
    return Tensor(input.shape, upper_relevance.data);
  if (std::holds_alternative<Flatten>(layer))
    return Tensor(input.shape, upper_relevance.data);
  throw std::invalid_argument(
      "lrp_step: batch-norm must be folded into its conv (fold_batchnorm)");
}

std::map<Index, Tensor> relevance_at_layers(const Network& net, const Tensor& x,
                                            int label, const std::vector<Index>& conv_ids,
                                            const LrpParams& params) {
  validate(params);
  if (conv_ids.empty()) throw std::invalid_argument("relevance_at_layers: no layers");
  std::map<Index, Index> end_to_conv;  // layer index -> conv id
  Index min_end = net.depth();
  for (Index cid : conv_ids) {
    const Index end = tap_end(net, cid);
    if (end >= net.depth() - 1)
      throw std::invalid_argument("relevance_at_layer: tap must be a hidden layer");
    end_to_conv[end] = cid;
    min_end = std::min(min_end, end);
  }
  const ForwardCache cache = forward_cached(net, x);
  Tensor r(cache.logits().shape, output_relevance(label, net.num_classes));
  std::map<Index, Tensor> out;
  // Before layer i is processed, r carries the relevance of layer i's output.
  for (Index i = net.depth() - 1; i >= min_end;) {
    if (auto it = end_to_conv.find(i); it != end_to_conv.end()) out.emplace(it->second, r);
    if (i == min_end) break;
    if (const auto* bn = std::get_if<BatchNorm>(&net.layers[size_t(i)])) {
      const auto* conv = i > 0 ? std::get_if<Conv2d>(&net.layers[size_t(i - 1)]) : nullptr;
      if (!conv)
        throw std::invalid_argument("lrp: batch-norm without preceding conv layer");
      r = lrp_step(fold_batchnorm(*conv, *bn), cache.inputs[size_t(i - 1)], r, params);
      i -= 2;
    } else {
      r = lrp_step(net.layers[size_t(i)], cache.inputs[size_t(i)], r, params);
      --i;
    }
  }
  return out;
}

Tensor relevance_at_layer(const Network& net, const Tensor& x, int label,
                          Index conv_id, const LrpParams& params) {
  return relevance_at_layers(net, x, label, {conv_id}, params).at(conv_id);
}

Eigen::VectorXd feature_map_relevance(const Tensor& rel_map) {
  if (rel_map.rank() != 3)
    throw std::invalid_argument("feature_map_relevance: expected conv feature maps, got " +
                                shape_str(rel_map.shape));
  const Index C = rel_map.shape[0], HW = rel_map.shape[1] * rel_map.shape[2];
  Eigen::VectorXd out(C);
  for (Index c = 0; c < C; ++c) out[c] = rel_map.data.segment(c * HW, HW).mean();
  return out;
}

std::vector<RelevanceScoreMatrix> relevance_score_matrices(
    const Network& net, const LabeledDataset& train_data,
    const std::vector<Index>& conv_ids, const LrpParams& params) {
  if (train_data.size() == 0)
    throw std::invalid_argument("relevance_score_matrix: empty dataset");
  const int c = net.num_classes;
  const std::string net_hash = model_hash(net);
  std::vector<RelevanceScoreMatrix> out;
  for (Index cid : conv_ids) {
    RelevanceScoreMatrix m;
    m.layer = cid;
    m.alpha = params.alpha;
    m.beta = params.beta;
    m.model_hash = net_hash;
    m.dataset_tag = train_data.tag;
    m.class_counts = Eigen::VectorXi::Zero(c);
    out.push_back(std::move(m));
  }

  for (size_t i = 0; i < train_data.size(); ++i) {
    const auto rels = relevance_at_layers(net, train_data.inputs[i], train_data.labels[i],
                                          conv_ids, params);
    for (RelevanceScoreMatrix& m : out) {
      const Eigen::VectorXd per_map = feature_map_relevance(rels.at(m.layer));
      if (m.scores.size() == 0) m.scores = Eigen::MatrixXd::Zero(c, per_map.size());
      m.scores.row(train_data.labels[i]) += per_map.transpose();
      m.class_counts[train_data.labels[i]] += 1;
    }
  }
  for (RelevanceScoreMatrix& m : out)
    for (int j = 0; j < c; ++j) {
      if (m.class_counts[j] == 0)
        throw std::runtime_error("relevance_score_matrix: class " + std::to_string(j) +
                                 " has no samples; row average undefined");
      m.scores.row(j) /= double(m.class_counts[j]);
    }
  return out;
}

RelevanceScoreMatrix relevance_score_matrix(const Network& net,
                                            const LabeledDataset& train_data,
                                            Index conv_id, const LrpParams& params) {
  return relevance_score_matrices(net, train_data, {conv_id}, params).front();
}

namespace {

Json matrix_to_json(const RelevanceScoreMatrix& m) {
  Json j;
  j["format"] = "racnet-relevance";
  j["version"] = 1;
  j["layer"] = m.layer;
  j["alpha"] = m.alpha;
  j["beta"] = m.beta;
  j["model_hash"] = m.model_hash;
  j["dataset_tag"] = m.dataset_tag;
  j["class_counts"] = std::vector<int>(m.class_counts.data(),
                                       m.class_counts.data() + m.class_counts.size());
  j["scores"] = eigen_to_json(m.scores);
  return j;
}

}  // namespace

void save_matrix(const RelevanceScoreMatrix& m, const std::string& path) {
  atomic_write(path, matrix_to_json(m).dump());
}

RelevanceScoreMatrix load_matrix(const std::string& path) {
  const Json j = load_json(path);
  try {
    if (j.at("format").get<std::string>() != "racnet-relevance")
      throw std::runtime_error("not a relevance matrix file");
    RelevanceScoreMatrix m;
    m.layer = j.at("layer").get<Index>();
    m.alpha = j.at("alpha").get<double>();
    m.beta = j.at("beta").get<double>();
    m.model_hash = j.at("model_hash").get<std::string>();
    m.dataset_tag = j.at("dataset_tag").get<std::string>();
    const auto counts = j.at("class_counts").get<std::vector<int>>();
    m.class_counts = Eigen::Map<const Eigen::VectorXi>(counts.data(),
                                                       Eigen::Index(counts.size()));
    m.scores = json_to_matrix(j.at("scores"));
    return m;
  } catch (const Json::exception& e) {
    throw std::runtime_error("corrupt relevance file " + path + ": " + e.what());
  }
}

std::string matrix_hash(const RelevanceScoreMatrix& m) {
  return fnv1a_hex(matrix_to_json(m).dump());
}

}  // namespace racnet
