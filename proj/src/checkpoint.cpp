#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "compass/error.hpp"
#include "compass/model.hpp"
#include "compass/serialize.hpp"

namespace compass {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'C', 'M', 'P', 'S', 'C', 'K', 'P', 'T'};

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
    }
}

std::uint32_t get_u32(const std::string& in, std::size_t offset) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[offset + static_cast<std::size_t>(i)]))
             << (8 * i);
    }
    return v;
}

}  // namespace

json config_to_json(const ModelConfig& c) {
    return json{{"n_layers", c.n_layers},     {"n_heads", c.n_heads},
                {"d_model", c.d_model},       {"d_head", c.d_head},
                {"d_mlp", c.d_mlp},           {"vocab_size", c.vocab_size},
                {"max_seq_len", c.max_seq_len}, {"positional", to_string(c.positional)},
                {"linearized", c.linearized}, {"ln_eps", c.ln_eps}};
}

ModelConfig config_from_json(const json& j) {
    if (!j.is_object()) {
        throw ParseError("model config must be an object");
    }
    ModelConfig c;
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "n_layers") c.n_layers = value.get<int>();
            else if (key == "n_heads") c.n_heads = value.get<int>();
            else if (key == "d_model") c.d_model = value.get<int>();
            else if (key == "d_head") c.d_head = value.get<int>();
            else if (key == "d_mlp") c.d_mlp = value.get<int>();
            else if (key == "vocab_size") c.vocab_size = value.get<int>();
            else if (key == "max_seq_len") c.max_seq_len = value.get<int>();
            else if (key == "positional") c.positional = positional_from_string(value.get<std::string>());
            else if (key == "linearized") c.linearized = value.get<bool>();
            else if (key == "ln_eps") c.ln_eps = value.get<double>();
            else throw ParseError("model config: unknown key '" + key + "'");
        } catch (const json::exception&) {
            throw ParseError("model config: key '" + key + "' has the wrong type");
        }
    }
    c.validate();
    return c;
}

std::string checkpoint_bytes(const Checkpoint& ckpt) {
    Weights& w = const_cast<Weights&>(ckpt.weights);
    const std::vector<ParamView> views = param_views(w, ckpt.config);
    json tensors = json::array();
    for (const ParamView& v : views) {
        tensors.push_back(json{{"name", v.name}, {"shape", v.shape}});
    }
    const json header{{"config", config_to_json(ckpt.config)},
                      {"step", ckpt.step},
                      {"rng_seed", ckpt.rng_seed},
                      {"tensors", tensors}};
    const std::string header_text = header.dump();

    std::string out(kMagic, sizeof(kMagic));
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(header_text.size()));
    out += header_text;
    for (const ParamView& v : views) {
        for (std::size_t i = 0; i < v.size; ++i) {
            const auto f = static_cast<float>(v.data[i]);
            std::uint32_t bits = 0;
            std::memcpy(&bits, &f, sizeof(bits));
            put_u32(out, bits);
        }
    }
    return out;
}

Checkpoint checkpoint_from_bytes(const std::string& bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
        throw ParseError("not a checkpoint file (bad magic)");
    }
    const std::uint32_t version = get_u32(bytes, 8);
    if (version != kCheckpointVersion) {
        throw VersionMismatch("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                              std::to_string(kCheckpointVersion) + ")");
    }
    const std::uint32_t header_len = get_u32(bytes, 12);
    if (16 + static_cast<std::size_t>(header_len) > bytes.size()) {
        throw ParseError("checkpoint header truncated");
    }
    json header;
    try {
        header = json::parse(bytes.substr(16, header_len));
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("checkpoint header is not valid JSON: ") + e.what());
    }

    Checkpoint ckpt;
    try {
        ckpt.config = config_from_json(header.at("config"));
        ckpt.step = header.at("step").get<std::int64_t>();
        ckpt.rng_seed = header.at("rng_seed").get<std::uint64_t>();
    } catch (const json::exception& e) {
        throw ParseError(std::string("checkpoint header: ") + e.what());
    }
    ckpt.weights = Weights::zeros(ckpt.config);
    if (ckpt.config.positional == PositionalScheme::Sinusoidal) {
        ckpt.weights.pos_embed = init_model(ckpt.config, 0).weights.pos_embed;
        ckpt.weights.pos_embed = ckpt.weights.pos_embed.cast<float>().cast<double>();
    }

    const std::vector<ParamView> views = param_views(ckpt.weights, ckpt.config);
    const json& tensors = header.at("tensors");
    if (!tensors.is_array() || tensors.size() != views.size()) {
        throw ParseError("checkpoint tensor table does not match the model config");
    }
    std::size_t offset = 16 + header_len;
    for (std::size_t t = 0; t < views.size(); ++t) {
        const ParamView& v = views[t];
        const json& rec = tensors[t];
        if (rec.value("name", std::string()) != v.name || rec.value("shape", std::vector<int>()) != v.shape) {
            throw ParseError("checkpoint tensor " + std::to_string(t) + " ('" + rec.value("name", std::string()) +
                             "') does not match expected '" + v.name + "'");
        }
        if (offset + 4 * v.size > bytes.size()) {
            throw ParseError("checkpoint data truncated in tensor '" + v.name + "'");
        }
        for (std::size_t i = 0; i < v.size; ++i) {
            const std::uint32_t bits = get_u32(bytes, offset);
            float f = 0.0F;
            std::memcpy(&f, &bits, sizeof(f));
            v.data[i] = static_cast<double>(f);
            offset += 4;
        }
    }
    if (offset != bytes.size()) {
        throw ParseError("checkpoint has trailing bytes");
    }
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error("cannot write checkpoint '" + path.string() + "'");
    }
    const std::string bytes = checkpoint_bytes(ckpt);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw MissingInput("cannot open checkpoint '" + path.string() + "'");
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
        return checkpoint_from_bytes(ss.str());
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

std::string checkpoint_filename(std::int64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "step_%08lld.ckpt", static_cast<long long>(step));
    return buf;
}

}  // namespace compass
