#pragma once

// Dense networks with hand-written reverse mode, Adam, and a flat
// checkpoint format.

#include <Eigen/Core>

#include <string>
#include <vector>

#include <json.hpp>

#include "stldp/parallel.hpp"

namespace stldp::nn {

struct ParamTensor {
  std::string name;
  Eigen::MatrixXd value;
  Eigen::MatrixXd grad;
  Eigen::MatrixXd m;  // Adam moments
  Eigen::MatrixXd v;
  long step = 0;

  ParamTensor() = default;
  ParamTensor(std::string n, Eigen::Index rows, Eigen::Index cols);
  void zero_grad() { grad.setZero(); }
};

/// Activations kept by forward() for backward(). acts[0] is the input,
/// acts[i] the output of layer i (post-ReLU for hidden layers).
struct Tape {
  std::vector<Eigen::MatrixXd> acts;
};

/// Affine layers with ReLU between them and an identity output. Inputs and
/// outputs are column-batched: one column per sample.
class Mlp {
 public:
  Mlp() = default;
  /// sizes = {in, hidden..., out}; weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  Mlp(const std::string& name, const std::vector<int>& sizes, Rng& rng);

  int input_size() const { return sizes_.front(); }
  int output_size() const { return sizes_.back(); }
  const std::vector<int>& sizes() const { return sizes_; }

  Eigen::MatrixXd forward(const Eigen::MatrixXd& x, Tape* tape = nullptr) const;
  /// Accumulates parameter gradients and returns dL/dx.
  Eigen::MatrixXd backward(const Tape& tape, const Eigen::MatrixXd& dy);
  /// dL/dx only; parameter gradients untouched.
  Eigen::MatrixXd input_gradient(const Tape& tape, const Eigen::MatrixXd& dy) const;

  void zero_output_layer();
  std::vector<ParamTensor*> params();
  std::vector<const ParamTensor*> params() const;

 private:
  Eigen::MatrixXd backward_impl(const Tape& tape, const Eigen::MatrixXd& dy, bool accumulate);

  std::vector<int> sizes_;
  std::vector<ParamTensor> weights_;
  std::vector<ParamTensor> biases_;
};

struct Adam {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  /// Bias-corrected update, then gradients are zeroed.
  void step(const std::vector<ParamTensor*>& params) const;
};

void zero_grad(const std::vector<ParamTensor*>& params);

/// Writes "STLDP1", a little-endian u64 manifest length, the JSON manifest
/// {tensors: [{name, shape, offset}], meta} and the float64 blob (row-major).
void save_checkpoint(const std::string& path, const std::vector<const ParamTensor*>& params,
                     const nlohmann::json& meta = nlohmann::json::object());
/// Fills tensors by name; throws DataError on a bad header, a missing tensor
/// or a shape mismatch. Returns the meta block.
nlohmann::json load_checkpoint(const std::string& path, const std::vector<ParamTensor*>& params);
/// The meta block alone, for callers that size tensors from it.
nlohmann::json read_checkpoint_meta(const std::string& path);

}  // namespace stldp::nn
