#pragma once

#include "m3ps/model.hpp"
#include "m3ps/train_config.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace m3ps {

/// Trained model plus everything needed to resume or reproduce it.
struct Checkpoint {
    TrainConfig config;
    TokenVocabulary vocab;
    AttributeVocabulary attributes;
    M3PSModel model;
    std::int64_t step = 0;
    std::string rng_state;  // textual mt19937_64 state
    nlohmann::json data;    // where the training data came from (synthetic spec, paths); informational

    const ModelDims& dims() const { return model.dims; }
};

class CheckpointError : public Error {
public:
    using Error::Error;
};

inline constexpr char kCheckpointMagic[8] = {'M', '3', 'P', 'S', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string rng_to_string(const Rng& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

inline Rng rng_from_string(const std::string& s) {
    Rng rng;
    if (s.empty()) return rng;
    std::istringstream is(s);
    is >> rng;
    if (!is) throw CheckpointError("corrupt rng state");
    return rng;
}

namespace ckpt_detail {

template <typename T>
void put(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw CheckpointError("truncated checkpoint");
    return v;
}

}  // namespace ckpt_detail

/// Layout: magic, u32 version, u64 header length, JSON header, then every
/// tensor's doubles (row-major) in header order.
inline void write_checkpoint(std::ostream& os, Checkpoint& c) {
    nlohmann::json tensors = nlohmann::json::array();
    c.model.for_each_param([&](const std::string& name, Param& p) {
        tensors.push_back({{"name", name}, {"rows", p.rows()}, {"cols", p.cols()}});
    });
    const nlohmann::json header{{"format", "m3ps-checkpoint"},
                                {"version", kCheckpointVersion},
                                {"config", to_json(c.config)},
                                {"dims", to_json(c.model.dims)},
                                {"token_vocab", c.vocab.tokens()},
                                {"attribute_vocab", c.attributes.entries},
                                {"attribute_threshold", c.attributes.threshold},
                                {"step", c.step},
                                {"rng_state", c.rng_state},
                                {"data", c.data},
                                {"byte_order", "little"},
                                {"tensors", tensors}};
    const std::string h = header.dump();
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    ckpt_detail::put(os, kCheckpointVersion);
    ckpt_detail::put(os, static_cast<std::uint64_t>(h.size()));
    os.write(h.data(), static_cast<std::streamsize>(h.size()));
    c.model.for_each_param([&](const std::string&, Param& p) {
        os.write(reinterpret_cast<const char*>(p.value.data()),
                 static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(p.value.size())));
    });
    if (!os) throw CheckpointError("failed writing checkpoint");
}

inline Checkpoint read_checkpoint(std::istream& is) {
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) throw CheckpointError("not an m3ps checkpoint");
    const auto version = ckpt_detail::get<std::uint32_t>(is);
    if (version != kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    const auto len = ckpt_detail::get<std::uint64_t>(is);
    if (len > (1ull << 32)) throw CheckpointError("corrupt checkpoint header length");
    std::string h(len, '\0');
    is.read(h.data(), static_cast<std::streamsize>(len));
    if (!is) throw CheckpointError("truncated checkpoint header");
    const auto header = nlohmann::json::parse(h);

    Checkpoint c;
    c.config = train_config_from_json(header.at("config"));
    c.vocab = TokenVocabulary(header.at("token_vocab").get<std::vector<std::string>>());
    c.attributes = AttributeVocabulary(header.at("attribute_vocab").get<std::vector<std::string>>(),
                                       header.value("attribute_threshold", 0));
    c.step = header.at("step").get<std::int64_t>();
    c.rng_state = header.at("rng_state").get<std::string>();
    c.data = header.value("data", nlohmann::json());
    c.model = M3PSModel(model_dims_from_json(header.at("dims")));
    if (c.model.dims.vocab_size != c.vocab.size()) throw CheckpointError("token vocabulary size disagrees with dims");

    const auto& tensors = header.at("tensors");
    std::size_t k = 0;
    c.model.for_each_param([&](const std::string& name, Param& p) {
        if (k >= tensors.size()) throw CheckpointError("checkpoint is missing tensor " + name);
        const auto& t = tensors[k++];
        if (t.at("name") != name || t.at("rows").get<Eigen::Index>() != p.rows() ||
            t.at("cols").get<Eigen::Index>() != p.cols())
            throw CheckpointError("tensor mismatch at " + name);
        is.read(reinterpret_cast<char*>(p.value.data()),
                static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(p.value.size())));
        if (!is) throw CheckpointError("truncated tensor data at " + name);
        p.zero_grad();
    });
    if (k != tensors.size()) throw CheckpointError("checkpoint has unexpected extra tensors");
    return c;
}

inline void save_checkpoint(Checkpoint& c, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot write " + path);
    write_checkpoint(f, c);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot read " + path);
    return read_checkpoint(f);
}

}  // namespace m3ps
