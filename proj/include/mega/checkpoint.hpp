#ifndef MEGA_CHECKPOINT_HPP
#define MEGA_CHECKPOINT_HPP

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mega/nets.hpp"
#include "mega/optim.hpp"
#include "mega/tensor.hpp"

namespace mega {

// Container: magic line, little-endian uint64 header length, JSON header
// describing named f64 arrays (shape, offset, count relative to the data
// section), then raw little-endian doubles.
inline constexpr const char* kCkptMagic = "MEGA-CKPT-v1\n";

struct CheckpointData {
    std::map<std::string, std::string> meta;
    std::vector<std::pair<std::string, Tensor>> arrays;

    const Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : arrays)
            if (n == name) return &t;
        return nullptr;
    }
    std::string meta_or(const std::string& key, const std::string& fallback) const {
        auto it = meta.find(key);
        return it == meta.end() ? fallback : it->second;
    }
};

inline void save_checkpoint(const std::string& path, const CheckpointData& ckpt) {
    nlohmann::json header;
    header["meta"] = ckpt.meta;
    nlohmann::json arrays = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& [name, t] : ckpt.arrays) {
        nlohmann::json a;
        a["name"] = name;
        a["dtype"] = "f64";
        std::vector<int> shape;
        for (int i = 0; i < t.shape.rank; ++i) shape.push_back(t.shape.d[i]);
        a["shape"] = shape;
        a["offset"] = offset;
        a["count"] = t.data.size();
        arrays.push_back(a);
        offset += t.data.size() * sizeof(double);
    }
    header["arrays"] = arrays;
    std::string hs = header.dump();

    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        require(static_cast<bool>(out), "cannot write checkpoint: " + path);
        out.write(kCkptMagic, static_cast<std::streamsize>(std::strlen(kCkptMagic)));
        std::uint64_t hlen = hs.size();
        out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
        out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
        for (const auto& [name, t] : ckpt.arrays)
            out.write(reinterpret_cast<const char*>(t.data.data()),
                      static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        require(static_cast<bool>(out), "write failed for checkpoint: " + path);
    }
    std::filesystem::rename(tmp, path);
}

inline CheckpointData load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), "cannot open checkpoint: " + path);
    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    const std::size_t magic_len = std::strlen(kCkptMagic);
    if (blob.size() < magic_len + sizeof(std::uint64_t) || std::memcmp(blob.data(), kCkptMagic, magic_len) != 0)
        fatal("corrupt checkpoint (magic): " + path);
    std::uint64_t hlen;
    std::memcpy(&hlen, blob.data() + magic_len, sizeof(hlen));
    std::size_t data_start = magic_len + sizeof(hlen) + hlen;
    if (data_start > blob.size()) fatal("corrupt checkpoint (header length): " + path);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(blob.substr(magic_len + sizeof(hlen), hlen));
    } catch (const nlohmann::json::exception&) {
        fatal("corrupt checkpoint (header): " + path);
    }

    CheckpointData ckpt;
    try {
        if (header.contains("meta"))
            for (auto it = header["meta"].begin(); it != header["meta"].end(); ++it)
                ckpt.meta[it.key()] = it.value().get<std::string>();
        for (const auto& a : header["arrays"]) {
            std::string name = a["name"].get<std::string>();
            if (a["dtype"].get<std::string>() != "f64")
                fatal("corrupt checkpoint (array '" + name + "': unsupported dtype): " + path);
            std::vector<int> dims = a["shape"].get<std::vector<int>>();
            std::size_t offset = a["offset"].get<std::size_t>();
            std::size_t count = a["count"].get<std::size_t>();
            Shape shape;
            shape.rank = static_cast<int>(dims.size());
            require(shape.rank >= 1 && shape.rank <= 4, "corrupt checkpoint (array '" + name + "': bad rank)");
            for (int i = 0; i < shape.rank; ++i) shape.d[i] = dims[static_cast<std::size_t>(i)];
            if (static_cast<std::size_t>(shape.numel()) != count)
                fatal("corrupt checkpoint (array '" + name + "': shape/count mismatch): " + path);
            if (data_start + offset + count * sizeof(double) > blob.size())
                fatal("corrupt checkpoint (array '" + name + "': truncated data): " + path);
            Tensor t(shape);
            std::memcpy(t.data.data(), blob.data() + data_start + offset, count * sizeof(double));
            ckpt.arrays.emplace_back(name, std::move(t));
        }
    } catch (const nlohmann::json::exception&) {
        fatal("corrupt checkpoint (array table): " + path);
    }
    return ckpt;
}

inline void warn_if_config_mismatch(const CheckpointData& ckpt, const std::string& expected_hash) {
    std::string stored = ckpt.meta_or("config_hash", "");
    if (!stored.empty() && !expected_hash.empty() && stored != expected_hash)
        std::fprintf(stderr, "warning: checkpoint config hash %s differs from current %s; proceeding\n",
                     stored.c_str(), expected_hash.c_str());
}

// ----------------------------------------------------- parameter bridging

inline void put_params(CheckpointData& ckpt, const NamedParams& np) {
    for (const auto& [name, v] : np) ckpt.arrays.emplace_back(name, v->value);
}

inline void load_params_into(const CheckpointData& ckpt, const NamedParams& np, const std::string& what) {
    for (const auto& [name, v] : np) {
        const Tensor* t = ckpt.find(name);
        if (!t) fatal("checkpoint missing array '" + name + "' for " + what);
        if (t->shape != v->value.shape)
            fatal("checkpoint array '" + name + "' shape " + t->shape.str() + " does not match " +
                  v->value.shape.str());
        v->value = *t;
    }
}

inline void put_adam_state(CheckpointData& ckpt, const std::string& prefix, Adam& opt, const NamedParams& np) {
    require(opt.params().size() == np.size(), "put_adam_state: optimizer/param mismatch");
    for (std::size_t i = 0; i < np.size(); ++i) {
        ckpt.arrays.emplace_back(prefix + ".m." + np[i].first, opt.first_moments()[i]);
        ckpt.arrays.emplace_back(prefix + ".v." + np[i].first, opt.second_moments()[i]);
    }
    ckpt.meta[prefix + ".t"] = std::to_string(opt.steps_taken());
}

inline void load_adam_state(const CheckpointData& ckpt, const std::string& prefix, Adam& opt, const NamedParams& np) {
    require(opt.params().size() == np.size(), "load_adam_state: optimizer/param mismatch");
    for (std::size_t i = 0; i < np.size(); ++i) {
        const Tensor* m = ckpt.find(prefix + ".m." + np[i].first);
        const Tensor* v = ckpt.find(prefix + ".v." + np[i].first);
        if (!m || !v) fatal("checkpoint missing optimizer state '" + prefix + "' for " + np[i].first);
        opt.first_moments()[i] = *m;
        opt.second_moments()[i] = *v;
    }
    opt.set_steps_taken(std::stoll(ckpt.meta_or(prefix + ".t", "0")));
}

// --------------------------------------------------------- net-level helpers

inline void save_embedder(const std::string& path, const ToyEmbedder& emb, const std::string& config_hash = "") {
    CheckpointData ckpt;
    ckpt.meta["kind"] = "embedder";
    ckpt.meta["arch"] = emb.arch;
    ckpt.meta["dim"] = std::to_string(emb.dim);
    if (!config_hash.empty()) ckpt.meta["config_hash"] = config_hash;
    put_params(ckpt, emb.named_params());
    save_checkpoint(path, ckpt);
}

inline ToyEmbedder load_embedder(const std::string& path) {
    CheckpointData ckpt = load_checkpoint(path);
    if (ckpt.meta_or("kind", "") != "embedder") fatal("checkpoint is not an embedder: " + path);
    ToyEmbedder emb = build_toy_embedder(ckpt.meta_or("arch", "A"), std::stoi(ckpt.meta_or("dim", "64")), 0);
    NamedParams np = emb.named_params();
    load_params_into(ckpt, np, "embedder");
    set_requires_grad(np, false);
    return emb;
}

}  // namespace mega

#endif
