#ifndef TRAT_NET_HPP
#define TRAT_NET_HPP

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "trat/graph.hpp"
#include "trat/tensor.hpp"

namespace trat {

struct Layer {
  enum class Kind { dense, conv, relu, tanh, flatten };
  Kind kind = Kind::relu;
  // dense(in, out)
  int in = 0, out = 0;
  // conv(ic, oc, k, s, p)
  int ic = 0, oc = 0, k = 0, s = 1, p = 0;
  int pidx = -1;  // index of the layer's weight in params; bias follows at pidx+1
};

// Architecture descriptors follow the mini-grammar
//   dense(in,out) | conv(ic,oc,k,s,p) | relu | tanh | flatten
// comma-separated, e.g. "dense(2,64),tanh,dense(64,2)". Named presets
// `mlp-moons` and `cnn-tiny` expand to full descriptors.
std::vector<Layer> parse_arch(const std::string& descriptor);
std::string resolve_arch_preset(const std::string& name_or_descriptor);

// Result of recording a forward pass on a graph.
struct ForwardRec {
  int logits = -1;
  int final_w = -1;  // node of the last dense layer's weight matrix
  std::map<std::string, int> param_nodes;
};

struct Network {
  std::string arch;
  std::vector<Layer> layers;
  std::vector<std::pair<std::string, Tensor>> params;  // insertion-ordered

  static Network init(const std::string& descriptor, Rng& rng);

  int num_classes() const;
  std::string final_weight_name() const;
  const Tensor& param(const std::string& name) const;
  std::vector<std::string> param_names() const;

  // Records the forward pass from an existing input node. Weights enter the
  // graph as named parameters when train_weights is set, as constants
  // otherwise (so attack gradients do not traverse them).
  ForwardRec record(Graph& g, int input, bool train_weights) const;
  // Same, but reusing parameter nodes registered earlier (one registration
  // serves many samples in a batch graph).
  ForwardRec record_with(Graph& g, int input, const std::map<std::string, int>& param_nodes) const;
  int forward(Graph& g, const Tensor& s, bool train_weights = true) const;

  // Plain-arithmetic forward for gradient-free evaluation.
  Tensor forward_values(const Tensor& s) const;

  // Copy with params shifted by delta (must cover every parameter exactly).
  Network perturbed(const GradMap& delta) const;
  // One gaussian(0, std) draw per parameter entry, shaped like params.
  GradMap noise_like(Rng& rng, double std) const;
};

// Bit-exact persistence. Layout: magic "TRAT", format version, architecture
// descriptor, per-parameter name/shape/row-major float64 little-endian data,
// and a trailing CRC32 over everything before it. load() rebuilds the network
// from the stored descriptor and rejects files whose magic, version, CRC, or
// parameter set disagrees.
void save(const Network& net, const std::string& path);
Network load(const std::string& path);

// Checkpoint payload without the trailing CRC; checksum() is the CRC32 of it.
// Two networks with identical arch and bitwise-identical weights share a checksum.
std::string serialize(const Network& net);
std::uint32_t checksum(const Network& net);

}  // namespace trat

#endif  // TRAT_NET_HPP
