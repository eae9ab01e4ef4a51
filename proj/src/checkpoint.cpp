#include "simplexlm/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>

#include "simplexlm/errors.hpp"

namespace simplexlm {

namespace {

constexpr uint32_t kMagic = 0x4d4c5853; // "SXLM"
constexpr uint32_t kVersion = 1;

uint32_t crc32_update(uint32_t crc, const void* data, size_t n) {
    static uint32_t table[256];
    static bool ready = false;
    if (!ready) {
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) {
                c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            }
            table[i] = c;
        }
        ready = true;
    }
    const unsigned char* p = static_cast<const unsigned char*>(data);
    crc ^= 0xffffffffu;
    for (size_t i = 0; i < n; ++i) {
        crc = table[(crc ^ p[i]) & 0xffu] ^ (crc >> 8);
    }
    return crc ^ 0xffffffffu;
}

class Writer {
public:
    explicit Writer(const std::string& path) : path_(path), out_(path, std::ios::binary) {
        if (!out_) {
            throw IoError("cannot open for write: " + path);
        }
    }
    void bytes(const void* p, size_t n) {
        out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
        crc_ = crc32_update(crc_, p, n);
    }
    void u32(uint32_t v) { bytes(&v, sizeof v); }
    void u64(uint64_t v) { bytes(&v, sizeof v); }
    void str(const std::string& s) {
        u32(static_cast<uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void tensor(const std::string& name, const Tensor32& t) {
        str(name);
        u32(static_cast<uint32_t>(t.rows));
        u32(static_cast<uint32_t>(t.cols));
        bytes(t.v.data(), t.v.size() * sizeof(float));
    }
    void finish() {
        const uint32_t crc = crc_;
        out_.write(reinterpret_cast<const char*>(&crc), sizeof crc);
        out_.flush();
        if (!out_) {
            throw IoError("write failed: " + path_);
        }
        out_.close();
    }

private:
    std::string path_;
    std::ofstream out_;
    uint32_t crc_ = 0;
};

class Reader {
public:
    Reader(const std::string& path) : path_(path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) {
            throw IoError("cannot open: " + path);
        }
        buf_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    size_t pos() const { return pos_; }
    void bytes(void* p, size_t n) {
        if (pos_ + n > buf_.size()) {
            fail("truncated");
        }
        std::memcpy(p, buf_.data() + pos_, n);
        pos_ += n;
    }
    uint32_t u32() {
        uint32_t v = 0;
        bytes(&v, sizeof v);
        return v;
    }
    uint64_t u64() {
        uint64_t v = 0;
        bytes(&v, sizeof v);
        return v;
    }
    std::string str() {
        const uint32_t n = u32();
        if (n > 1u << 20) {
            fail("implausible string length");
        }
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
    [[noreturn]] void fail(const std::string& why) const {
        throw FormatError("checkpoint " + path_ + ": " + why + " at byte offset " +
                          std::to_string(pos_));
    }
    void verify_crc() {
        if (buf_.size() < pos_ + sizeof(uint32_t)) {
            fail("missing trailing checksum");
        }
        const uint32_t actual = crc32_update(0, buf_.data(), pos_);
        uint32_t stored = 0;
        std::memcpy(&stored, buf_.data() + pos_, sizeof stored);
        if (actual != stored) {
            fail("checksum mismatch");
        }
    }

private:
    std::string path_;
    std::vector<char> buf_;
    size_t pos_ = 0;
};

uint32_t pack_flags(const ModelDims& d) {
    uint32_t f = 0;
    if (d.tie_output) f |= 1u;
    if (d.absent_uniform) f |= 2u;
    return f;
}

} // namespace

void save_params(const DenoiserParams& p, const std::string& path,
                 const CheckpointExtra* extra) {
    const std::string tmp = path + ".tmp";
    {
        Writer w(tmp);
        w.u32(kMagic);
        w.u32(kVersion);
        const ModelDims& d = p.dims;
        w.u32(static_cast<uint32_t>(d.vocab));
        w.u32(static_cast<uint32_t>(d.d_model));
        w.u32(static_cast<uint32_t>(d.n_layers));
        w.u32(static_cast<uint32_t>(d.n_heads));
        w.u32(static_cast<uint32_t>(d.ffn()));
        w.u32(static_cast<uint32_t>(d.max_len));
        w.u32(static_cast<uint32_t>(d.total_steps));
        w.u32(static_cast<uint32_t>(d.time_quant));
        w.u32(pack_flags(d));
        const float temp = static_cast<float>(d.input_temp);
        uint32_t temp_bits = 0;
        std::memcpy(&temp_bits, &temp, sizeof temp_bits);
        w.u32(temp_bits);

        uint32_t count = 0;
        for_each_tensor(const_cast<DenoiserParams&>(p),
                        [&](const std::string&, Tensor32&) { ++count; });
        if (extra) {
            count += static_cast<uint32_t>(extra->tensors.size());
        }
        w.u32(count);
        for_each_tensor(const_cast<DenoiserParams&>(p),
                        [&](const std::string& name, Tensor32& t) { w.tensor(name, t); });
        if (extra) {
            for (const auto& [name, t] : extra->tensors) {
                w.tensor(name, t);
            }
        }
        w.u32(extra ? static_cast<uint32_t>(extra->meta.size()) : 0u);
        if (extra) {
            for (const auto& [name, value] : extra->meta) {
                w.str(name);
                w.u64(value);
            }
        }
        w.finish();
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw IoError("cannot rename " + tmp + " to " + path);
    }
}

DenoiserParams load_params(const std::string& path, CheckpointExtra* extra) {
    Reader r(path);
    if (r.u32() != kMagic) {
        r.fail("bad magic");
    }
    if (r.u32() != kVersion) {
        r.fail("unsupported version");
    }
    ModelDims d;
    d.vocab = static_cast<int>(r.u32());
    d.d_model = static_cast<int>(r.u32());
    d.n_layers = static_cast<int>(r.u32());
    d.n_heads = static_cast<int>(r.u32());
    d.ffn_hidden = static_cast<int>(r.u32());
    d.max_len = static_cast<int>(r.u32());
    d.total_steps = static_cast<int>(r.u32());
    d.time_quant = static_cast<int>(r.u32());
    const uint32_t flags = r.u32();
    d.tie_output = (flags & 1u) != 0;
    d.absent_uniform = (flags & 2u) != 0;
    const uint32_t temp_bits = r.u32();
    float temp = 0.0f;
    std::memcpy(&temp, &temp_bits, sizeof temp);
    d.input_temp = static_cast<double>(temp);
    try {
        d.validate();
    } catch (const ConfigError& e) {
        r.fail(std::string("invalid dimension header (") + e.what() + ")");
    }

    std::map<std::string, Tensor32> records;
    const uint32_t count = r.u32();
    for (uint32_t i = 0; i < count; ++i) {
        const std::string name = r.str();
        Tensor32 t;
        t.rows = static_cast<int>(r.u32());
        t.cols = static_cast<int>(r.u32());
        if (t.rows < 0 || t.cols < 0 ||
            static_cast<uint64_t>(t.rows) * static_cast<uint64_t>(t.cols) > (1ull << 31)) {
            r.fail("implausible tensor shape for " + name);
        }
        t.v.resize(static_cast<size_t>(t.rows) * t.cols);
        r.bytes(t.v.data(), t.v.size() * sizeof(float));
        if (!records.emplace(name, std::move(t)).second) {
            r.fail("duplicate tensor " + name);
        }
    }

    std::vector<std::pair<std::string, uint64_t>> meta;
    const uint32_t meta_count = r.u32();
    for (uint32_t i = 0; i < meta_count; ++i) {
        const std::string name = r.str();
        meta.emplace_back(name, r.u64());
    }
    r.verify_crc();

    DenoiserParams p = allocate_params(d);
    for_each_tensor(p, [&](const std::string& name, Tensor32& t) {
        auto it = records.find(name);
        if (it == records.end()) {
            r.fail("missing tensor " + name);
        }
        if (it->second.rows != t.rows || it->second.cols != t.cols) {
            r.fail("shape mismatch for tensor " + name);
        }
        t = std::move(it->second);
        records.erase(it);
    });
    if (extra) {
        extra->tensors.assign(std::make_move_iterator(records.begin()),
                              std::make_move_iterator(records.end()));
        extra->meta = std::move(meta);
    }
    return p;
}

} // namespace simplexlm
