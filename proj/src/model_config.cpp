#include "compass/model_config.hpp"

#include <cstdio>

#include "compass/error.hpp"

namespace compass {

void ModelConfig::validate() const {
    const auto require = [](int value, const char* name) {
        if (value < 1) {
            throw InvalidArgument(std::string("model config: ") + name + " must be >= 1, got " +
                                  std::to_string(value));
        }
    };
    require(n_layers, "n_layers");
    require(n_heads, "n_heads");
    require(d_model, "d_model");
    require(d_head, "d_head");
    require(d_mlp, "d_mlp");
    require(vocab_size, "vocab_size");
    require(max_seq_len, "max_seq_len");
    if (!(ln_eps > 0.0)) {
        throw InvalidArgument("model config: ln_eps must be positive");
    }
}

std::vector<std::string> ModelConfig::warnings() const {
    std::vector<std::string> out;
    if (d_head * n_heads > d_model) {
        out.push_back("d_head * n_heads (" + std::to_string(d_head * n_heads) + ") exceeds d_model (" +
                      std::to_string(d_model) + ")");
    }
    return out;
}

std::string ModelConfig::id() const {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "L%d-H%d-d%d-dh%d-mlp%d-v%d-t%d-%s%s", n_layers, n_heads, d_model, d_head,
                  d_mlp, vocab_size, max_seq_len, to_string(positional), linearized ? "-linear" : "");
    return buf;
}

const char* to_string(PositionalScheme scheme) {
    return scheme == PositionalScheme::Learned ? "learned" : "sinusoidal";
}

PositionalScheme positional_from_string(const std::string& name) {
    if (name == "learned") {
        return PositionalScheme::Learned;
    }
    if (name == "sinusoidal") {
        return PositionalScheme::Sinusoidal;
    }
    throw InvalidArgument("unknown positional scheme '" + name + "'");
}

}  // namespace compass
