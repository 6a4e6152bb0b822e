#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace compass {

enum class PositionalScheme : std::uint8_t { Learned, Sinusoidal };

// Shape of the pre-norm decoder-only toy transformer.
//
// `linearized` swaps every nonlinearity for the identity: the MLP activation
// becomes y = x, layer norm becomes y = x, and each head attends uniformly
// over the causal window. The resulting network is affine in its input
// embeddings, which is what the exact-patching checks rely on.
struct ModelConfig {
    int n_layers = 2;
    int n_heads = 4;
    int d_model = 32;
    int d_head = 8;
    int d_mlp = 128;
    int vocab_size = 128;
    int max_seq_len = 16;
    PositionalScheme positional = PositionalScheme::Learned;
    bool linearized = false;
    double ln_eps = 1e-5;

    // Throws InvalidArgument when a dimension is < 1.
    void validate() const;

    // Non-fatal remarks (for example d_head * n_heads > d_model).
    std::vector<std::string> warnings() const;

    // Stable identifier used to tag graphs and checkpoints.
    std::string id() const;

    bool operator==(const ModelConfig&) const = default;
};

const char* to_string(PositionalScheme scheme);
PositionalScheme positional_from_string(const std::string& name);

}  // namespace compass
