#include "noisear/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include <json.hpp>

#include "noisear/wire.hpp"

namespace noisear {

namespace {

using nlohmann::json;
using namespace wire;

json config_to_json(const ModelConfig& c) {
    return json{{"channels", c.shape.channels},
                {"height", c.shape.height},
                {"width", c.shape.width},
                {"patch_size", c.shape.patch_size},
                {"d_model", c.d_model},
                {"n_heads", c.n_heads},
                {"n_decoder_layers", c.n_decoder_layers},
                {"n_head_layers", c.n_head_layers},
                {"ffn_mult", c.ffn_mult},
                {"vocab_size", c.vocab_size},
                {"cond_max_len", c.cond_max_len},
                {"log_var_clamp_lo", c.log_var_clamp_lo},
                {"log_var_clamp_hi", c.log_var_clamp_hi},
                {"seed", c.seed}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.shape.channels = j.at("channels").get<std::size_t>();
    c.shape.height = j.at("height").get<std::size_t>();
    c.shape.width = j.at("width").get<std::size_t>();
    c.shape.patch_size = j.at("patch_size").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.n_decoder_layers = j.at("n_decoder_layers").get<std::size_t>();
    c.n_head_layers = j.at("n_head_layers").get<std::size_t>();
    c.ffn_mult = j.at("ffn_mult").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.cond_max_len = j.at("cond_max_len").get<std::size_t>();
    c.log_var_clamp_lo = j.at("log_var_clamp_lo").get<double>();
    c.log_var_clamp_hi = j.at("log_var_clamp_hi").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

}  // namespace

void save_checkpoint(const Model& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open for writing: " + path);

    json meta;
    meta["config"] = config_to_json(model.config());
    json tensors = json::array();
    for (const TensorEntry& e : model.tensor_table()) {
        tensors.push_back({{"name", e.name},
                           {"shape", e.shape},
                           {"offset", e.offset * sizeof(float)}});
    }
    meta["tensors"] = tensors;
    const std::string doc = meta.dump();

    out.write("NARC", 4);
    write_u32(out, 1);
    write_u64(out, doc.size());
    out.write(doc.data(), static_cast<std::streamsize>(doc.size()));

    const std::vector<double>& p = model.params();
    std::vector<unsigned char> bytes(p.size() * 4);
    for (std::size_t i = 0; i < p.size(); ++i) {
        const float f = static_cast<float>(p[i]);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        for (int b = 0; b < 4; ++b)
            bytes[i * 4 + b] = static_cast<unsigned char>(bits >> (8 * b));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw io_error("write failed: " + path);
}

Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open: " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "NARC", 4) != 0)
        throw io_error("bad checkpoint magic");
    const std::uint32_t version = read_u32(in);
    if (version != 1) throw io_error("unsupported checkpoint version");
    const std::uint64_t meta_len = read_u64(in);
    std::string doc(meta_len, '\0');
    if (!in.read(doc.data(), static_cast<std::streamsize>(meta_len)))
        throw io_error("truncated checkpoint metadata");

    json meta;
    try {
        meta = json::parse(doc);
    } catch (const json::exception& e) {
        throw io_error(std::string("bad checkpoint metadata: ") + e.what());
    }
    Model model(config_from_json(meta.at("config")));

    const auto& tensors = meta.at("tensors");
    const auto& table = model.tensor_table();
    if (tensors.size() != table.size())
        throw io_error("tensor table size mismatch");
    for (std::size_t i = 0; i < table.size(); ++i) {
        if (tensors[i].at("name").get<std::string>() != table[i].name)
            throw io_error("tensor table name mismatch: " + table[i].name);
    }

    std::vector<double>& p = model.params();
    std::vector<unsigned char> bytes(p.size() * 4);
    if (!in.read(reinterpret_cast<char*>(bytes.data()),
                 static_cast<std::streamsize>(bytes.size())))
        throw io_error("truncated checkpoint tensors");
    for (std::size_t i = 0; i < p.size(); ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b)
            bits |= static_cast<std::uint32_t>(bytes[i * 4 + b]) << (8 * b);
        float f;
        std::memcpy(&f, &bits, 4);
        p[i] = static_cast<double>(f);
    }
    return model;
}

}  // namespace noisear
