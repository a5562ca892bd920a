#include "racnet/rac.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "racnet/serialize.hpp"

namespace racnet {

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

double blc_prob(const BinaryLinearClassifier& blc, const Eigen::VectorXd& features) {
  if (features.size() != blc.weight.size())
    throw std::invalid_argument("blc: feature width " + std::to_string(features.size()) +
                                " != weight width " + std::to_string(blc.weight.size()));
  return sigmoid(blc.weight.dot(features) + blc.bias);
}

double Rac::param_count() const {
  double n = 0;
  for (const auto& blc : blcs) n += double(blc.weight.size()) + 1.0;
  return n;
}

std::vector<int> select_relevant_features(const RelevanceScoreMatrix& m, int cls, int k) {
  if (cls < 0 || cls >= m.scores.rows())
    throw std::out_of_range("select_relevant_features: class out of range");
  const int r = int(m.scores.cols());
  if (k <= 0 || k > r)
    throw std::invalid_argument("select_relevant_features: k=" + std::to_string(k) +
                                " exceeds feature-map count r=" + std::to_string(r));
  std::vector<int> idx(static_cast<size_t>(r));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return m.scores(cls, a) > m.scores(cls, b);
  });
  idx.resize(size_t(k));
  return idx;
}

std::vector<int> binary_labels(const std::vector<int>& labels, int cls) {
  std::vector<int> out(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) out[i] = labels[i] == cls ? 1 : 0;
  return out;
}

Eigen::VectorXd gather_features(const Tensor& tap, const std::vector<int>& maps) {
  if (tap.rank() != 3)
    throw std::invalid_argument("gather_features: expected (C,H,W) tap");
  const Index HW = tap.shape[1] * tap.shape[2];
  Eigen::VectorXd out(Index(maps.size()) * HW);
  for (size_t j = 0; j < maps.size(); ++j) {
    if (maps[j] < 0 || maps[j] >= tap.shape[0])
      throw std::out_of_range("gather_features: map index out of range");
    out.segment(Index(j) * HW, HW) = tap.data.segment(Index(maps[j]) * HW, HW);
  }
  return out;
}

BinaryLinearClassifier train_blc_rows(const std::function<void(size_t, Eigen::VectorXd&)>& load_row,
                                      Index dim, const std::vector<int>& ybin,
                                      const BlcTrainConfig& cfg, int class_id) {
  const int pos = int(std::count(ybin.begin(), ybin.end(), 1));
  if (pos == 0 || pos == int(ybin.size()))
    throw std::invalid_argument("train_blc: need at least one positive and one negative");

  BinaryLinearClassifier blc;
  blc.class_id = class_id;
  blc.weight = Eigen::VectorXd::Zero(dim);
  blc.bias = 0.0;
  if (cfg.epochs == 0) return blc;

  std::mt19937_64 rng(cfg.seed);
  std::vector<size_t> order(ybin.size());
  std::iota(order.begin(), order.end(), 0);
  Eigen::VectorXd row(dim);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (size_t start = 0; start < order.size(); start += size_t(cfg.batch_size)) {
      const size_t end = std::min(order.size(), start + size_t(cfg.batch_size));
      Eigen::VectorXd gw = Eigen::VectorXd::Zero(dim);
      double gb = 0.0, wsum = 0.0;
      for (size_t bi = start; bi < end; ++bi) {
        const size_t si = order[bi];
        load_row(si, row);
        const double p = sigmoid(row.dot(blc.weight) + blc.bias);
        const double w = (ybin[si] == 1 && cfg.pos_weight > 0.0) ? cfg.pos_weight : 1.0;
        const double d = w * (p - double(ybin[si]));
        gw += d * row;
        gb += d;
        wsum += w;
      }
      blc.weight -= (cfg.lr / wsum) * gw;
      blc.bias -= (cfg.lr / wsum) * gb;
    }
  }
  return blc;
}

BinaryLinearClassifier train_blc(const Eigen::MatrixXd& X, const std::vector<int>& ybin,
                                 const BlcTrainConfig& cfg, int class_id) {
  if (size_t(X.rows()) != ybin.size())
    throw std::invalid_argument("train_blc: sample/label count mismatch");
  return train_blc_rows(
      [&](size_t i, Eigen::VectorXd& row) { row = X.row(Index(i)).transpose(); },
      X.cols(), ybin, cfg, class_id);
}

Rac train_rac_from_taps(const std::vector<Tensor>& taps, const std::vector<int>& labels,
                        const RelevanceScoreMatrix& m, Index conv_id, int k,
                        const BlcTrainConfig& cfg, int num_classes) {
  if (taps.empty() || taps.size() != labels.size())
    throw std::invalid_argument("train_rac: tap/label count mismatch");
  if (m.layer != conv_id)
    throw std::invalid_argument("train_rac: relevance matrix is for layer " +
                                std::to_string(m.layer) + ", not " +
                                std::to_string(conv_id));
  Rac rac;
  rac.layer = conv_id;
  rac.features.layer = conv_id;
  rac.features.k = k;
  const Index HW = taps[0].shape[1] * taps[0].shape[2];
  for (int cls = 0; cls < num_classes; ++cls) {
    const std::vector<int> maps = select_relevant_features(m, cls, k);
    BlcTrainConfig bcfg = cfg;
    bcfg.seed = cfg.seed + std::uint64_t(cls);
    if (bcfg.pos_weight <= 0.0) bcfg.pos_weight = double(num_classes - 1);
    const auto load_row = [&](size_t i, Eigen::VectorXd& row) {
      for (size_t j = 0; j < maps.size(); ++j)
        row.segment(Index(j) * HW, HW) = taps[i].data.segment(Index(maps[j]) * HW, HW);
    };
    rac.blcs.push_back(
        train_blc_rows(load_row, Index(k) * HW, binary_labels(labels, cls), bcfg, cls));
    rac.features.per_class.push_back(maps);
  }
  return rac;
}

Rac train_rac(const Network& net, const LabeledDataset& data,
              const RelevanceScoreMatrix& m, Index conv_id, int k,
              const BlcTrainConfig& cfg) {
  std::vector<Tensor> taps;
  taps.reserve(data.size());
  for (const Tensor& x : data.inputs)
    taps.push_back(forward_with_taps(net, x, {conv_id}).second.at(conv_id));
  return train_rac_from_taps(taps, data.labels, m, conv_id, k, cfg, data.num_classes);
}

RacOutput rac_forward(const Rac& rac, const Tensor& tap) {
  RacOutput out;
  out.blc_probs.resize(Index(rac.blcs.size()));
  for (size_t cls = 0; cls < rac.blcs.size(); ++cls)
    out.blc_probs[Index(cls)] =
        blc_prob(rac.blcs[cls], gather_features(tap, rac.features.per_class[cls]));
  out.rac_class = 0;
  out.rac_prob = out.blc_probs[0];
  for (Index i = 1; i < out.blc_probs.size(); ++i)
    if (out.blc_probs[i] > out.rac_prob) {
      out.rac_prob = out.blc_probs[i];
      out.rac_class = int(i);
    }
  return out;
}

Tensor rac_backward(const Rac& rac, const Tensor& tap, const Eigen::VectorXd& dprob) {
  const Index HW = tap.shape[1] * tap.shape[2];
  Tensor g(tap.shape);
  for (size_t cls = 0; cls < rac.blcs.size(); ++cls) {
    if (dprob[Index(cls)] == 0.0) continue;
    const auto& blc = rac.blcs[cls];
    const double p = blc_prob(blc, gather_features(tap, rac.features.per_class[cls]));
    const double dz = dprob[Index(cls)] * p * (1.0 - p);
    const auto& maps = rac.features.per_class[cls];
    for (size_t j = 0; j < maps.size(); ++j)
      g.data.segment(Index(maps[j]) * HW, HW) +=
          dz * blc.weight.segment(Index(j) * HW, HW);
  }
  return g;
}

namespace {

Json rac_to_json(const Rac& rac) {
  Json j;
  j["layer"] = rac.layer;
  j["k"] = rac.features.k;
  j["feature_sets"] = rac.features.per_class;
  Json blcs = Json::array();
  for (const auto& blc : rac.blcs) {
    Json b;
    b["class_id"] = blc.class_id;
    b["weight"] = eigen_to_json(blc.weight);
    b["bias"] = blc.bias;
    blcs.push_back(std::move(b));
  }
  j["blcs"] = std::move(blcs);
  return j;
}

Rac rac_from_json(const Json& j) {
  Rac rac;
  rac.layer = j.at("layer").get<Index>();
  rac.features.layer = rac.layer;
  rac.features.k = j.at("k").get<int>();
  rac.features.per_class = j.at("feature_sets").get<std::vector<std::vector<int>>>();
  for (const Json& b : j.at("blcs")) {
    BinaryLinearClassifier blc;
    blc.class_id = b.at("class_id").get<int>();
    blc.weight = json_to_vector(b.at("weight"));
    blc.bias = b.at("bias").get<double>();
    rac.blcs.push_back(std::move(blc));
  }
  return rac;
}

}  // namespace

void save_racs(const RacBundle& bundle, const std::string& path) {
  Json j;
  j["format"] = "racnet-racs";
  j["version"] = 1;
  j["model_hash"] = bundle.model_hash;
  j["matrix_hashes"] = bundle.matrix_hashes;
  Json racs = Json::array();
  for (const Rac& r : bundle.racs) racs.push_back(rac_to_json(r));
  j["racs"] = std::move(racs);
  atomic_write(path, j.dump());
}

RacBundle load_racs(const std::string& path) {
  const Json j = load_json(path);
  try {
    if (j.at("format").get<std::string>() != "racnet-racs")
      throw std::runtime_error("not a RAC bundle");
    RacBundle bundle;
    bundle.model_hash = j.at("model_hash").get<std::string>();
    bundle.matrix_hashes = j.at("matrix_hashes").get<std::vector<std::string>>();
    for (const Json& rj : j.at("racs")) bundle.racs.push_back(rac_from_json(rj));
    return bundle;
  } catch (const Json::exception& e) {
    throw std::runtime_error("corrupt RAC bundle " + path + ": " + e.what());
  }
}

}  // namespace racnet
