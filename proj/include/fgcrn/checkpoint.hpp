#pragma once

// Binary checkpoint: model config, named parameter arrays, batch-norm running
// statistics, Adam moments and the epoch counter. Little-endian raw doubles, so
// a save/load round trip is bit-exact.
//
//   "FGCRNCKP" u32 version
//   str config_hash  str model_describe  u64 epoch
//   model config fields
//   u64 count, then per array: str name, u64 ndim, u64 dims..., f64 values...
//   (parameters, then "<branch>.bn.running_mean/var", then "adam.m.<name>",
//    "adam.v.<name>"), then adam scalars

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "fgcrn/error.hpp"
#include "fgcrn/net.hpp"

namespace fgcrn {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'F', 'G', 'C', 'R', 'N', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    net::Model model;
    net::AdamState adam;
    std::uint64_t epoch = 0;
    std::string config_hash;
};

namespace detail {

struct Writer {
    std::string buf;
    template <class T>
    void pod(const T& v) {
        buf.append(reinterpret_cast<const char*>(&v), sizeof v);
    }
    void str(const std::string& s) {
        pod<std::uint64_t>(s.size());
        buf += s;
    }
    void array(const std::string& name, const std::vector<std::size_t>& shape, const std::vector<double>& values) {
        str(name);
        pod<std::uint64_t>(shape.size());
        for (auto d : shape) pod<std::uint64_t>(d);
        buf.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(double));
    }
};

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;
    std::string path;

    void need(std::size_t n) {
        if (buf.size() - pos < n) throw DataError("checkpoint '" + path + "': truncated");
    }
    template <class T>
    T pod() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, buf.data() + pos, sizeof v);
        pos += sizeof v;
        return v;
    }
    std::string str() {
        const auto n = pod<std::uint64_t>();
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

struct StoredArray {
    std::vector<std::size_t> shape;
    std::vector<double> values;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
    const auto& m = ck.model;
    const auto& c = m.cfg;
    detail::Writer w;
    w.buf.append(kCheckpointMagic, 8);
    w.pod(kCheckpointVersion);
    w.str(ck.config_hash);
    w.str(c.describe());
    w.pod<std::uint64_t>(ck.epoch);
    for (std::size_t v : {c.num_vars, c.window, c.hidden, c.num_classes, c.sain_hidden, c.tam_reduction, c.tam_kernel})
        w.pod<std::uint64_t>(v);
    w.pod<std::uint8_t>(static_cast<std::uint8_t>(c.norm));
    w.pod<std::uint8_t>(c.bidirectional);
    w.pod<std::uint8_t>(c.use_tam);
    w.pod(c.eps);
    w.pod(c.bn_momentum);

    const auto params = m.parameters();
    std::uint64_t count = params.size();
    for (const auto& br : m.branches)
        if (br.norm == net::NormKind::BatchNorm) count += 2;
    const bool has_adam = !ck.adam.m.empty();
    if (has_adam) {
        if (ck.adam.m.size() != params.size() || ck.adam.v.size() != params.size())
            throw StateError("checkpoint: optimizer state does not match model");
        count += 2 * params.size();
    }
    w.pod(count);
    for (const auto* p : params) w.array(p->name, p->shape, p->value);
    for (const auto& br : m.branches) {
        if (br.norm != net::NormKind::BatchNorm) continue;
        const std::string prefix = "msdc" + std::to_string(br.kernel) + ".bn.";
        w.array(prefix + "running_mean", {br.running_mean.size()}, br.running_mean);
        w.array(prefix + "running_var", {br.running_var.size()}, br.running_var);
    }
    if (has_adam) {
        for (std::size_t i = 0; i < params.size(); ++i) w.array("adam.m." + params[i]->name, params[i]->shape, ck.adam.m[i]);
        for (std::size_t i = 0; i < params.size(); ++i) w.array("adam.v." + params[i]->name, params[i]->shape, ck.adam.v[i]);
    }
    w.pod<std::uint8_t>(has_adam);
    w.pod(ck.adam.beta1);
    w.pod(ck.adam.beta2);
    w.pod(ck.adam.eps);
    w.pod<std::uint64_t>(ck.adam.step);
    return w.buf;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& path = "<memory>") {
    detail::Reader r{bytes, 0, path};
    r.need(8);
    if (std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) throw DataError("checkpoint '" + path + "': bad magic");
    r.pos = 8;
    const auto version = r.pod<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw DataError("checkpoint '" + path + "': unsupported version " + std::to_string(version));
    Checkpoint ck;
    ck.config_hash = r.str();
    const std::string described = r.str();
    ck.epoch = r.pod<std::uint64_t>();
    net::ModelConfig c;
    for (std::size_t* v : {&c.num_vars, &c.window, &c.hidden, &c.num_classes, &c.sain_hidden, &c.tam_reduction, &c.tam_kernel})
        *v = r.pod<std::uint64_t>();
    const auto norm = r.pod<std::uint8_t>();
    if (norm > 2) throw DataError("checkpoint '" + path + "': bad norm mode");
    c.norm = static_cast<net::NormMode>(norm);
    c.bidirectional = r.pod<std::uint8_t>() != 0;
    c.use_tam = r.pod<std::uint8_t>() != 0;
    c.eps = r.pod<double>();
    c.bn_momentum = r.pod<double>();
    if (c.describe() != described) throw DataError("checkpoint '" + path + "': config block does not match its description");

    std::map<std::string, detail::StoredArray> arrays;
    const auto count = r.pod<std::uint64_t>();
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::string name = r.str();
        detail::StoredArray a;
        const auto ndim = r.pod<std::uint64_t>();
        std::size_t n = 1;
        for (std::uint64_t d = 0; d < ndim; ++d) {
            a.shape.push_back(r.pod<std::uint64_t>());
            n *= a.shape.back();
        }
        r.need(n * sizeof(double));
        a.values.resize(n);
        std::memcpy(a.values.data(), bytes.data() + r.pos, n * sizeof(double));
        r.pos += n * sizeof(double);
        if (!arrays.emplace(name, std::move(a)).second) throw DataError("checkpoint '" + path + "': duplicate array " + name);
    }
    const bool has_adam = r.pod<std::uint8_t>() != 0;
    ck.adam.beta1 = r.pod<double>();
    ck.adam.beta2 = r.pod<double>();
    ck.adam.eps = r.pod<double>();
    ck.adam.step = r.pod<std::uint64_t>();
    if (r.pos != bytes.size()) throw DataError("checkpoint '" + path + "': trailing bytes");

    auto take = [&](const std::string& name, const std::vector<std::size_t>& shape) -> std::vector<double> {
        auto it = arrays.find(name);
        if (it == arrays.end()) throw DataError("checkpoint '" + path + "': missing array " + name);
        if (it->second.shape != shape) throw ShapeError("checkpoint '" + path + "': array " + name + " has the wrong shape");
        auto v = std::move(it->second.values);
        arrays.erase(it);
        return v;
    };

    ck.model = net::Model::create(c, 0);
    auto params = ck.model.parameters();
    for (auto* p : params) p->value = take(p->name, p->shape);
    for (auto& br : ck.model.branches) {
        if (br.norm != net::NormKind::BatchNorm) continue;
        const std::string prefix = "msdc" + std::to_string(br.kernel) + ".bn.";
        br.running_mean = take(prefix + "running_mean", {c.num_vars});
        br.running_var = take(prefix + "running_var", {c.num_vars});
    }
    if (has_adam) {
        for (auto* p : params) ck.adam.m.push_back(take("adam.m." + p->name, p->shape));
        for (auto* p : params) ck.adam.v.push_back(take("adam.v." + p->name, p->shape));
    }
    if (!arrays.empty()) throw DataError("checkpoint '" + path + "': unexpected array " + arrays.begin()->first);
    return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint '" + path + "'");
    const std::string bytes = serialize_checkpoint(ck);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("failed writing checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes, path);
}

}  // namespace fgcrn
