#include "orbitseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "orbitseg/errors.hpp"

namespace fs = std::filesystem;

namespace orbitseg {

namespace {

constexpr char kMagic[8] = {'O', 'R', 'B', 'S', 'E', 'G', 'C', 'K'};

std::uint64_t fnv1a(const std::uint8_t* p, std::size_t n) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

class Writer {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    template <typename U>
    void pod(U v) {
        static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
        bytes(&v, sizeof v);
    }
    void str(const std::string& s) {
        pod<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void tensor(const Tensor<float>& t) {
        for (int d : t.shape()) pod<std::int32_t>(d);
        bytes(t.data(), t.size() * sizeof(float));
    }
    std::vector<std::uint8_t>& buffer() { return buf_; }

private:
    std::vector<std::uint8_t> buf_;
};

class Reader {
public:
    Reader(const std::uint8_t* p, std::size_t n, std::string where) : p_(p), n_(n), where_(std::move(where)) {}

    void bytes(void* out, std::size_t n) {
        if (n > n_ - pos_) throw CorruptionError(where_ + ": unexpected end of data");
        std::memcpy(out, p_ + pos_, n);
        pos_ += n;
    }
    template <typename U>
    U pod() {
        U v;
        bytes(&v, sizeof v);
        return v;
    }
    std::string str() {
        const auto n = pod<std::uint32_t>();
        if (n > n_ - pos_) throw CorruptionError(where_ + ": string length exceeds data");
        std::string s(reinterpret_cast<const char*>(p_ + pos_), n);
        pos_ += n;
        return s;
    }
    Tensor<float> tensor() {
        Shape4 s;
        std::size_t count = 1;
        for (int& d : s) {
            d = pod<std::int32_t>();
            if (d < 0) throw CorruptionError(where_ + ": negative tensor extent");
            count *= static_cast<std::size_t>(d);
        }
        if (count * sizeof(float) > n_ - pos_) throw CorruptionError(where_ + ": tensor exceeds data");
        Tensor<float> t(s);
        bytes(t.data(), count * sizeof(float));
        return t;
    }
    bool done() const { return pos_ == n_; }

private:
    const std::uint8_t* p_;
    std::size_t n_;
    std::size_t pos_ = 0;
    std::string where_;
};

template <typename P>
void write_params(Writer& w, const P& params) {
    std::uint32_t count = 0;
    params.for_each([&](const std::string&, ParamGroup, const Weight<float>&) { ++count; });
    w.pod(count);
    params.for_each([&](const std::string& name, ParamGroup, const Weight<float>& wt) {
        w.str(name);
        w.tensor(wt.value);
    });
}

template <typename P>
void read_params(Reader& r, P& params, const std::string& where) {
    std::uint32_t expected = 0;
    params.for_each([&](const std::string&, ParamGroup, Weight<float>&) { ++expected; });
    const auto count = r.pod<std::uint32_t>();
    if (count != expected)
        throw ConfigMismatchError(where + ": " + std::to_string(count) + " tensors stored, model has " +
                                  std::to_string(expected));
    params.for_each([&](const std::string& name, ParamGroup, Weight<float>& wt) {
        const std::string stored = r.str();
        if (stored != name) throw ConfigMismatchError(where + ": expected tensor '" + name + "', found '" + stored + "'");
        Tensor<float> t = r.tensor();
        if (t.shape() != wt.value.shape())
            throw ConfigMismatchError(where + ": tensor '" + name + "' has shape " + shape_string(t.shape()) +
                                      ", model expects " + shape_string(wt.value.shape()));
        wt.value = std::move(t);
    });
}

}  // namespace

OptimizerState OptimizerState::capture(const std::string& label, const Adam<float>& opt) {
    OptimizerState s;
    s.label = label;
    s.steps = opt.steps();
    for (const auto& slot : opt.slots()) {
        s.m.push_back({slot.name, slot.m});
        s.v.push_back({slot.name, slot.v});
    }
    return s;
}

void OptimizerState::restore(Adam<float>& opt) const {
    if (m.size() != opt.slots().size() || v.size() != m.size())
        throw ConfigMismatchError("optimizer '" + label + "': slot count differs");
    for (std::size_t i = 0; i < m.size(); ++i) {
        auto& slot = opt.slots()[i];
        if (m[i].name != slot.name || v[i].name != slot.name || m[i].value.shape() != slot.m.shape() ||
            v[i].value.shape() != slot.v.shape())
            throw ConfigMismatchError("optimizer '" + label + "': slot '" + slot.name + "' does not match");
        slot.m = m[i].value;
        slot.v = v[i].value;
    }
    opt.set_steps(steps);
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
    Writer w;
    w.bytes(kMagic, sizeof kMagic);
    w.pod<std::uint32_t>(kCheckpointVersion);
    w.pod<std::uint64_t>(ckpt.model.fingerprint());
    w.pod<std::int32_t>(ckpt.model.input_size);
    w.pod<std::int32_t>(ckpt.model.seq_len);
    w.pod<std::int32_t>(ckpt.model.width_divisor);
    w.str(ckpt.method);
    w.pod<std::int32_t>(ckpt.epoch);
    w.pod<double>(ckpt.loss);
    write_params(w, ckpt.net.params());
    w.pod<std::uint8_t>(ckpt.disc ? 1 : 0);
    if (ckpt.disc) write_params(w, ckpt.disc->params());
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(ckpt.optimizers.size()));
    for (const auto& o : ckpt.optimizers) {
        w.str(o.label);
        w.pod<std::uint64_t>(o.steps);
        w.pod<std::uint32_t>(static_cast<std::uint32_t>(o.m.size()));
        for (std::size_t i = 0; i < o.m.size(); ++i) {
            w.str(o.m[i].name);
            w.tensor(o.m[i].value);
            w.tensor(o.v[i].value);
        }
    }
    auto& buf = w.buffer();
    const std::uint64_t sum = fnv1a(buf.data(), buf.size());
    w.pod(sum);

    if (path.has_parent_path() && !fs::exists(path.parent_path()))
        throw IoError("parent directory does not exist: " + path.parent_path().string());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path, const ModelConfig* expected) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path.string());
    const std::vector<std::uint8_t> buf{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    const std::string where = path.string();
    constexpr std::size_t header = sizeof kMagic + sizeof(std::uint32_t);
    if (buf.size() < header + sizeof(std::uint64_t)) throw CorruptionError(where + ": file too short");
    if (std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0) throw CorruptionError(where + ": not a checkpoint");
    std::uint32_t version;
    std::memcpy(&version, buf.data() + sizeof kMagic, sizeof version);
    if (version != kCheckpointVersion)
        throw VersionError(where + ": checkpoint version " + std::to_string(version) + ", expected " +
                           std::to_string(kCheckpointVersion));
    const std::size_t body = buf.size() - sizeof(std::uint64_t);
    std::uint64_t stored_sum;
    std::memcpy(&stored_sum, buf.data() + body, sizeof stored_sum);
    if (fnv1a(buf.data(), body) != stored_sum) throw CorruptionError(where + ": checksum mismatch");

    Reader r(buf.data() + header, body - header, where);
    const auto fingerprint = r.pod<std::uint64_t>();
    ModelConfig cfg;
    cfg.input_size = r.pod<std::int32_t>();
    cfg.seq_len = r.pod<std::int32_t>();
    cfg.width_divisor = r.pod<std::int32_t>();
    try {
        cfg.validate();
    } catch (const std::exception& e) {
        throw CorruptionError(where + ": stored model config invalid: " + e.what());
    }
    if (cfg.fingerprint() != fingerprint) throw CorruptionError(where + ": config fingerprint inconsistent");
    if (expected && expected->fingerprint() != fingerprint)
        throw ConfigMismatchError(where + ": checkpoint was built for a different model configuration");

    Checkpoint ck;
    ck.model = cfg;
    ck.net = SeqUnet<float>(cfg, 0);
    ck.method = r.str();
    ck.epoch = r.pod<std::int32_t>();
    ck.loss = r.pod<double>();
    read_params(r, ck.net.params(), where);
    if (r.pod<std::uint8_t>()) {
        ck.disc.emplace(cfg, 0);
        read_params(r, ck.disc->params(), where);
    }
    const auto nopt = r.pod<std::uint32_t>();
    for (std::uint32_t i = 0; i < nopt; ++i) {
        OptimizerState o;
        o.label = r.str();
        o.steps = r.pod<std::uint64_t>();
        const auto slots = r.pod<std::uint32_t>();
        for (std::uint32_t j = 0; j < slots; ++j) {
            const std::string name = r.str();
            o.m.push_back({name, r.tensor()});
            o.v.push_back({name, r.tensor()});
        }
        ck.optimizers.push_back(std::move(o));
    }
    if (!r.done()) throw CorruptionError(where + ": trailing bytes");
    return ck;
}

}  // namespace orbitseg
