#ifndef RACNET_SERIALIZE_HPP
#define RACNET_SERIALIZE_HPP

#include <string>

#include <json.hpp>

#include "racnet/tensor.hpp"

namespace racnet {

using Json = nlohmann::json;

Json eigen_to_json(const Eigen::MatrixXd& m);
Json eigen_to_json(const Eigen::VectorXd& v);
Eigen::MatrixXd json_to_matrix(const Json& j);
Eigen::VectorXd json_to_vector(const Json& j);

/// Write-temp-then-rename; the target never holds a partial file.
void atomic_write(const std::string& path, const std::string& content);

Json load_json(const std::string& path);

/// 64-bit FNV-1a, hex-encoded. Used for artifact provenance keys.
std::string fnv1a_hex(const std::string& bytes);

}  // namespace racnet

#endif
