#ifndef RACNET_TENSOR_HPP
#define RACNET_TENSOR_HPP

#include <Eigen/Dense>

#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace racnet {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using VectorX = Eigen::Vector<Scalar, Eigen::Dynamic>;

/// Dense N-d array stored flat, last axis fastest. Images use (C, H, W).
template <typename Scalar>
struct TensorT {
  Shape shape;
  VectorX<Scalar> data;

  TensorT() = default;
  explicit TensorT(Shape s) : shape(std::move(s)) {
    data = VectorX<Scalar>::Zero(numel(shape));
  }
  TensorT(Shape s, VectorX<Scalar> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel(shape) != data.size())
      throw std::invalid_argument("tensor: shape/data size mismatch");
  }

  static Index numel(const Shape& s) {
    Index n = 1;
    for (Index e : s) {
      if (e <= 0) throw std::invalid_argument("tensor: nonpositive extent");
      n *= e;
    }
    return n;
  }

  Index size() const { return data.size(); }
  Index rank() const { return static_cast<Index>(shape.size()); }

  bool all_finite() const { return data.allFinite(); }
};

using Tensor = TensorT<double>;

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    out += std::to_string(s[i]);
    if (i + 1 < s.size()) out += ",";
  }
  return out + ")";
}

}  // namespace racnet

#endif
