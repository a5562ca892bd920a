#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "racnet/network.hpp"

namespace racnet {

namespace {

struct AdamState {
  Eigen::ArrayXXd m, v;
};

class AdamOptimizer {
 public:
  AdamOptimizer(double lr) : lr_(lr) {}

  void step(Eigen::Ref<Eigen::MatrixXd> param, const Eigen::MatrixXd& grad,
            AdamState& st) {
    if (st.m.size() == 0) {
      st.m = Eigen::ArrayXXd::Zero(param.rows(), param.cols());
      st.v = st.m;
    }
    st.m = beta1_ * st.m + (1 - beta1_) * grad.array();
    st.v = beta2_ * st.v + (1 - beta2_) * grad.array().square();
    const Eigen::ArrayXXd mhat = st.m / (1 - std::pow(beta1_, t_));
    const Eigen::ArrayXXd vhat = st.v / (1 - std::pow(beta2_, t_));
    param.array() -= lr_ * mhat / (vhat.sqrt() + eps_);
  }

  void next_step() { ++t_; }

 private:
  double lr_, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  double t_ = 1;
};

double cross_entropy_grad(const Eigen::VectorXd& logits, int label,
                          Eigen::VectorXd& grad) {
  const Eigen::VectorXd p = softmax(logits);
  grad = p;
  grad[label] -= 1.0;
  return -std::log(std::max(p[label], 1e-300));
}

}  // namespace

Network train(Network net, const LabeledDataset& data, const TrainConfig& cfg,
              TrainStats* stats) {
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  if (cfg.epochs == 0) return net;

  std::vector<LayerGrads> grads(net.layers.size());
  std::vector<AdamState> wstate(net.layers.size()), bstate(net.layers.size()),
      gstate(net.layers.size()), betastate(net.layers.size());
  AdamOptimizer opt(cfg.lr);
  std::mt19937_64 rng(cfg.seed);
  std::vector<size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    size_t correct = 0;
    for (size_t start = 0; start < order.size(); start += size_t(cfg.batch_size)) {
      const size_t end = std::min(order.size(), start + size_t(cfg.batch_size));
      for (auto& g : grads) g = LayerGrads{};
      for (size_t li = 0; li < net.layers.size(); ++li) {
        if (auto* c = std::get_if<Conv2d>(&net.layers[li])) {
          grads[li].weight = Eigen::MatrixXd::Zero(c->weight.rows(), c->weight.cols());
          grads[li].bias = Eigen::VectorXd::Zero(c->bias.size());
        } else if (auto* b = std::get_if<BatchNorm>(&net.layers[li])) {
          grads[li].gamma = Eigen::VectorXd::Zero(b->gamma.size());
          grads[li].beta = Eigen::VectorXd::Zero(b->beta.size());
        } else if (auto* d = std::get_if<Dense>(&net.layers[li])) {
          grads[li].weight = Eigen::MatrixXd::Zero(d->weight.rows(), d->weight.cols());
          grads[li].bias = Eigen::VectorXd::Zero(d->bias.size());
        }
      }

      for (size_t bi = start; bi < end; ++bi) {
        const size_t si = order[bi];
        // Forward, refreshing batch-norm running statistics as we go.
        std::vector<Tensor> acts;
        acts.reserve(net.layers.size() + 1);
        acts.push_back(data.inputs[si]);
        for (Layer& l : net.layers) {
          if (auto* b = std::get_if<BatchNorm>(&l)) update_running_stats(*b, acts.back());
          acts.push_back(racnet::apply(l, acts.back()));
        }
        const Eigen::VectorXd& logits = acts.back().data;
        Eigen::VectorXd dlogits;
        const double loss = cross_entropy_grad(logits, data.labels[si], dlogits);
        if (!std::isfinite(loss))
          throw std::runtime_error("train: loss diverged (NaN/Inf) at epoch " +
                                   std::to_string(epoch));
        epoch_loss += loss;
        Eigen::Index argmax;
        logits.maxCoeff(&argmax);
        if (int(argmax) == data.labels[si]) ++correct;

        Tensor g(acts.back().shape, dlogits);
        for (Index i = net.depth() - 1; i >= 0; --i)
          g = backward(net.layers[size_t(i)], acts[size_t(i)], g, &grads[size_t(i)]);
      }

      const double scale = 1.0 / double(end - start);
      for (size_t li = 0; li < net.layers.size(); ++li) {
        if (auto* c = std::get_if<Conv2d>(&net.layers[li])) {
          opt.step(c->weight, grads[li].weight * scale, wstate[li]);
          opt.step(c->bias, grads[li].bias * scale, bstate[li]);
        } else if (auto* b = std::get_if<BatchNorm>(&net.layers[li])) {
          opt.step(b->gamma, grads[li].gamma * scale, gstate[li]);
          opt.step(b->beta, grads[li].beta * scale, betastate[li]);
        } else if (auto* d = std::get_if<Dense>(&net.layers[li])) {
          opt.step(d->weight, grads[li].weight * scale, wstate[li]);
          opt.step(d->bias, grads[li].bias * scale, bstate[li]);
        }
      }
      opt.next_step();
    }
    if (stats) {
      stats->epoch_loss.push_back(epoch_loss / double(data.size()));
      stats->epoch_accuracy.push_back(double(correct) / double(data.size()));
    }
  }
  return net;
}

Tensor input_gradient(const Network& net, const Tensor& x, const LossSpec& loss,
                      double* loss_value) {
  if (!loss.logit_loss && loss.tap_losses.empty())
    throw std::invalid_argument("input_gradient: empty loss spec");
  ForwardCache cache = forward_cached(net, x);

  std::map<Index, Index> tap_at;  // layer index -> conv id
  for (const auto& [conv_id, fn] : loss.tap_losses) tap_at[tap_end(net, conv_id)] = conv_id;

  double total = 0.0;
  Tensor g(cache.logits().shape);
  if (loss.logit_loss) {
    Eigen::VectorXd dlogits = Eigen::VectorXd::Zero(cache.logits().size());
    total += loss.logit_loss(cache.logits().data, dlogits);
    g.data = dlogits;
  }
  for (Index i = net.depth() - 1; i >= 0; --i) {
    if (auto it = tap_at.find(i); it != tap_at.end()) {
      const Tensor& tap = cache.inputs[size_t(i) + 1];
      Tensor tap_grad(tap.shape);
      total += loss.tap_losses.at(it->second)(tap, tap_grad);
      g.data += tap_grad.data;
    }
    g = backward(net.layers[size_t(i)], cache.inputs[size_t(i)], g, nullptr);
  }
  if (loss_value) *loss_value = total;
  return g;
}

}  // namespace racnet
