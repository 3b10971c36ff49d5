#include "stldp/nn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "stldp/errors.hpp"

namespace stldp::nn {

using nlohmann::json;

ParamTensor::ParamTensor(std::string n, Eigen::Index rows, Eigen::Index cols)
    : name(std::move(n)),
      value(Eigen::MatrixXd::Zero(rows, cols)),
      grad(Eigen::MatrixXd::Zero(rows, cols)),
      m(Eigen::MatrixXd::Zero(rows, cols)),
      v(Eigen::MatrixXd::Zero(rows, cols)) {}

Mlp::Mlp(const std::string& name, const std::vector<int>& sizes, Rng& rng) : sizes_(sizes) {
  if (sizes.size() < 2) throw std::invalid_argument("an MLP needs at least an input and an output size");
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(sizes[l]));
    std::uniform_real_distribution<double> u(-bound, bound);
    ParamTensor w(name + ".w" + std::to_string(l), sizes[l + 1], sizes[l]);
    ParamTensor b(name + ".b" + std::to_string(l), sizes[l + 1], 1);
    for (Eigen::Index i = 0; i < w.value.size(); ++i) w.value.data()[i] = u(rng);
    for (Eigen::Index i = 0; i < b.value.size(); ++i) b.value.data()[i] = u(rng);
    weights_.push_back(std::move(w));
    biases_.push_back(std::move(b));
  }
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x, Tape* tape) const {
  if (x.rows() != input_size()) {
    throw std::invalid_argument("MLP input has " + std::to_string(x.rows()) + " rows, expected " +
                                std::to_string(input_size()));
  }
  if (tape) {
    tape->acts.clear();
    tape->acts.push_back(x);
  }
  Eigen::MatrixXd h = x;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    Eigen::MatrixXd z = weights_[l].value * h;
    z.colwise() += biases_[l].value.col(0);
    if (l + 1 < weights_.size()) z = z.cwiseMax(0.0);
    h = std::move(z);
    if (tape) tape->acts.push_back(h);
  }
  return h;
}

Eigen::MatrixXd Mlp::backward_impl(const Tape& tape, const Eigen::MatrixXd& dy, bool accumulate) {
  Eigen::MatrixXd g = dy;
  for (std::size_t l = weights_.size(); l-- > 0;) {
    if (l + 1 < weights_.size()) {
      // ReLU subgradient at zero is zero.
      g = (tape.acts[l + 1].array() > 0.0).select(g, 0.0);
    }
    if (accumulate) {
      weights_[l].grad.noalias() += g * tape.acts[l].transpose();
      biases_[l].grad.col(0) += g.rowwise().sum();
    }
    g = weights_[l].value.transpose() * g;
  }
  return g;
}

Eigen::MatrixXd Mlp::backward(const Tape& tape, const Eigen::MatrixXd& dy) { return backward_impl(tape, dy, true); }

Eigen::MatrixXd Mlp::input_gradient(const Tape& tape, const Eigen::MatrixXd& dy) const {
  return const_cast<Mlp*>(this)->backward_impl(tape, dy, false);
}

void Mlp::zero_output_layer() {
  weights_.back().value.setZero();
  biases_.back().value.setZero();
}

std::vector<ParamTensor*> Mlp::params() {
  std::vector<ParamTensor*> out;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    out.push_back(&weights_[l]);
    out.push_back(&biases_[l]);
  }
  return out;
}

std::vector<const ParamTensor*> Mlp::params() const {
  std::vector<const ParamTensor*> out;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    out.push_back(&weights_[l]);
    out.push_back(&biases_[l]);
  }
  return out;
}

void Adam::step(const std::vector<ParamTensor*>& params) const {
  for (ParamTensor* p : params) {
    ++p->step;
    p->m = beta1 * p->m + (1.0 - beta1) * p->grad;
    p->v = beta2 * p->v + (1.0 - beta2) * p->grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(p->step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(p->step));
    p->value.array() -= lr * (p->m.array() / c1) / ((p->v.array() / c2).sqrt() + eps);
    p->grad.setZero();
  }
}

void zero_grad(const std::vector<ParamTensor*>& params) {
  for (ParamTensor* p : params) p->zero_grad();
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[6] = {'S', 'T', 'L', 'D', 'P', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

}  // namespace

void save_checkpoint(const std::string& path, const std::vector<const ParamTensor*>& params, const json& meta) {
  json tensors = json::array();
  std::uint64_t offset = 0;
  for (const ParamTensor* p : params) {
    tensors.push_back({{"name", p->name}, {"shape", {p->value.rows(), p->value.cols()}}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(p->value.size()) * sizeof(double);
  }
  const std::string manifest = json{{"tensors", tensors}, {"meta", meta}}.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint '" + path + "'");
  out.write(kMagic, sizeof kMagic);
  const std::uint64_t len = manifest.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
  for (const ParamTensor* p : params) {
    // Row-major on disk; Eigen stores column-major.
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = p->value;
    out.write(reinterpret_cast<const char*>(rm.data()), static_cast<std::streamsize>(rm.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("failed writing checkpoint '" + path + "'");
}

namespace {

struct Header {
  json manifest;
  std::streamoff blob_start = 0;
};

Header read_header(std::ifstream& in, const std::string& path) {
  char magic[sizeof kMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw DataError("'" + path + "' is not a STLDP1 checkpoint");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || len > (1u << 30)) throw DataError("corrupt checkpoint header in '" + path + "'");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw DataError("truncated checkpoint manifest in '" + path + "'");
  Header h;
  h.blob_start = in.tellg();
  try {
    h.manifest = json::parse(text);
    if (!h.manifest.at("tensors").is_array()) throw DataError("checkpoint manifest without a tensor list");
  } catch (const json::exception& e) {
    throw DataError("corrupt checkpoint manifest in '" + path + "': " + e.what());
  }
  return h;
}

}  // namespace

json read_checkpoint_meta(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  return read_header(in, path).manifest.value("meta", json::object());
}

json load_checkpoint(const std::string& path, const std::vector<ParamTensor*>& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  const Header h = read_header(in, path);
  std::map<std::string, json> by_name;
  try {
    for (const auto& t : h.manifest.at("tensors")) by_name[t.at("name").get<std::string>()] = t;
  } catch (const json::exception& e) {
    throw DataError("corrupt checkpoint manifest in '" + path + "': " + e.what());
  }
  for (ParamTensor* p : params) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) throw DataError("checkpoint '" + path + "' lacks tensor '" + p->name + "'");
    Eigen::Index rows = 0, cols = 0;
    std::uint64_t offset = 0;
    try {
      rows = it->second.at("shape").at(0).get<Eigen::Index>();
      cols = it->second.at("shape").at(1).get<Eigen::Index>();
      offset = it->second.at("offset").get<std::uint64_t>();
    } catch (const json::exception& e) {
      throw DataError("bad manifest entry for '" + p->name + "': " + e.what());
    }
    if (rows != p->value.rows() || cols != p->value.cols()) {
      throw DataError("tensor '" + p->name + "' has shape " + it->second.at("shape").dump() + " in the checkpoint, expected [" +
                      std::to_string(p->value.rows()) + "," + std::to_string(p->value.cols()) + "]");
    }
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(rows, cols);
    in.seekg(h.blob_start + static_cast<std::streamoff>(offset));
    in.read(reinterpret_cast<char*>(rm.data()), static_cast<std::streamsize>(rm.size() * sizeof(double)));
    if (!in) throw DataError("truncated tensor data for '" + p->name + "' in '" + path + "'");
    p->value = rm;
    p->grad.setZero();
  }
  return h.manifest.value("meta", json::object());
}

}  // namespace stldp::nn
