#include "racnet/serialize.hpp"

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "racnet/network.hpp"

namespace racnet {

Json eigen_to_json(const Eigen::MatrixXd& m) {
  Json j;
  j["rows"] = m.rows();
  j["cols"] = m.cols();
  std::vector<double> flat(size_t(m.size()));
  Eigen::Map<Eigen::MatrixXd>(flat.data(), m.rows(), m.cols()) = m;
  j["data"] = flat;
  return j;
}

Json eigen_to_json(const Eigen::VectorXd& v) {
  return Json(std::vector<double>(v.data(), v.data() + v.size()));
}

Eigen::MatrixXd json_to_matrix(const Json& j) {
  const auto flat = j.at("data").get<std::vector<double>>();
  const Eigen::Index rows = j.at("rows").get<Eigen::Index>();
  const Eigen::Index cols = j.at("cols").get<Eigen::Index>();
  if (Eigen::Index(flat.size()) != rows * cols)
    throw std::runtime_error("matrix: data length mismatch");
  return Eigen::Map<const Eigen::MatrixXd>(flat.data(), rows, cols);
}

Eigen::VectorXd json_to_vector(const Json& j) {
  const auto flat = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(flat.data(), Eigen::Index(flat.size()));
}

void atomic_write(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out.write(content.data(), std::streamsize(content.size()));
    if (!out) throw std::runtime_error("short write to " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("cannot rename " + tmp + " -> " + path);
}

Json load_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  Json j;
  try {
    in >> j;
  } catch (const Json::parse_error& e) {
    throw std::runtime_error("corrupt file " + path + ": " + e.what());
  }
  return j;
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

constexpr int kModelFormatVersion = 1;

Json layer_to_json(const Layer& l) {
  Json j;
  j["kind"] = layer_kind(l);
  if (const auto* c = std::get_if<Conv2d>(&l)) {
    j["in_ch"] = c->in_ch;
    j["out_ch"] = c->out_ch;
    j["ksize"] = c->ksize;
    j["stride"] = c->stride;
    j["pad"] = c->pad;
    j["weight"] = eigen_to_json(c->weight);
    j["bias"] = eigen_to_json(c->bias);
  } else if (const auto* b = std::get_if<BatchNorm>(&l)) {
    j["gamma"] = eigen_to_json(b->gamma);
    j["beta"] = eigen_to_json(b->beta);
    j["running_mean"] = eigen_to_json(b->running_mean);
    j["running_var"] = eigen_to_json(b->running_var);
    j["eps"] = b->eps;
  } else if (const auto* p = std::get_if<MaxPool>(&l)) {
    j["ksize"] = p->ksize;
    j["stride"] = p->stride;
  } else if (const auto* p = std::get_if<AvgPool>(&l)) {
    j["ksize"] = p->ksize;
    j["stride"] = p->stride;
  } else if (const auto* d = std::get_if<Dense>(&l)) {
    j["weight"] = eigen_to_json(d->weight);
    j["bias"] = eigen_to_json(d->bias);
  }
  return j;
}

Layer layer_from_json(const Json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "conv2d") {
    Conv2d c;
    c.in_ch = j.at("in_ch").get<Index>();
    c.out_ch = j.at("out_ch").get<Index>();
    c.ksize = j.at("ksize").get<Index>();
    c.stride = j.at("stride").get<Index>();
    c.pad = j.at("pad").get<Index>();
    c.weight = json_to_matrix(j.at("weight"));
    c.bias = json_to_vector(j.at("bias"));
    return c;
  }
  if (kind == "batchnorm") {
    BatchNorm b;
    b.gamma = json_to_vector(j.at("gamma"));
    b.beta = json_to_vector(j.at("beta"));
    b.running_mean = json_to_vector(j.at("running_mean"));
    b.running_var = json_to_vector(j.at("running_var"));
    b.eps = j.at("eps").get<double>();
    return b;
  }
  if (kind == "relu") return Relu{};
  if (kind == "maxpool") return MaxPool{j.at("ksize").get<Index>(), j.at("stride").get<Index>()};
  if (kind == "avgpool") return AvgPool{j.at("ksize").get<Index>(), j.at("stride").get<Index>()};
  if (kind == "flatten") return Flatten{};
  if (kind == "dense") {
    Dense d;
    d.weight = json_to_matrix(j.at("weight"));
    d.bias = json_to_vector(j.at("bias"));
    return d;
  }
  throw std::runtime_error("unknown layer kind: " + kind);
}

Json model_to_json(const Network& net) {
  if (net.layers.empty())
    throw std::invalid_argument("save_model: refusing to save an empty network");
  Json j;
  j["format"] = "racnet-model";
  j["version"] = kModelFormatVersion;
  j["input_shape"] = net.input_shape;
  j["num_classes"] = net.num_classes;
  Json layers = Json::array();
  for (const Layer& l : net.layers) layers.push_back(layer_to_json(l));
  j["layers"] = std::move(layers);
  return j;
}

}  // namespace

void save_model(const Network& net, const std::string& path) {
  atomic_write(path, model_to_json(net).dump());
}

Network load_model(const std::string& path) {
  const Json j = load_json(path);
  try {
    if (j.at("format").get<std::string>() != "racnet-model")
      throw std::runtime_error("not a model file");
    if (j.at("version").get<int>() != kModelFormatVersion)
      throw std::runtime_error("unsupported model format version " +
                               std::to_string(j.at("version").get<int>()));
    Network net;
    net.input_shape = j.at("input_shape").get<Shape>();
    net.num_classes = j.at("num_classes").get<int>();
    for (const Json& lj : j.at("layers")) net.layers.push_back(layer_from_json(lj));
    if (net.layers.empty()) throw std::runtime_error("model has no layers");
    return net;
  } catch (const Json::exception& e) {
    throw std::runtime_error("corrupt model file " + path + ": " + e.what());
  }
}

std::string model_hash(const Network& net) {
  return fnv1a_hex(model_to_json(net).dump());
}

}  // namespace racnet
