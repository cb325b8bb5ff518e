#include "disendiff/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace disendiff {

namespace {

void put_u16(std::ostream& f, uint16_t v) {
    char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
    f.write(b, 2);
}
void put_u32(std::ostream& f, uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    f.write(b, 4);
}
void put_u64(std::ostream& f, uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    f.write(b, 8);
}
void put_f32(std::ostream& f, float v) {
    static_assert(sizeof(float) == 4);
    char b[4];
    std::memcpy(b, &v, 4);
    f.write(b, 4);
}
uint16_t get_u16(std::istream& f) {
    unsigned char b[2];
    f.read(reinterpret_cast<char*>(b), 2);
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
}
uint32_t get_u32(std::istream& f) {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}
uint64_t get_u64(std::istream& f) {
    unsigned char b[8];
    f.read(reinterpret_cast<char*>(b), 8);
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}
float get_f32(std::istream& f) {
    char b[4];
    f.read(b, 4);
    float v;
    std::memcpy(&v, b, 4);
    return v;
}

}  // namespace

void write_checkpoint_tensors(const std::string& path,
                              const std::vector<std::pair<std::string, Tensor>>& tensors) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    f.write("DSDF", 4);
    put_u32(f, kCheckpointVersion);
    put_u32(f, static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        if (name.size() > 0xffff)
            throw std::invalid_argument("checkpoint: tensor name too long");
        put_u16(f, static_cast<uint16_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        f.put(static_cast<char>(t.shape().size()));
        for (int d : t.shape()) put_u64(f, static_cast<uint64_t>(d));
        for (double v : t.data()) put_f32(f, static_cast<float>(v));
    }
    if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
}

std::map<std::string, Tensor> read_checkpoint_tensors(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (std::memcmp(magic, "DSDF", 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    const uint32_t version = get_u32(f);
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    const uint32_t count = get_u32(f);
    std::map<std::string, Tensor> out;
    for (uint32_t i = 0; i < count; ++i) {
        const uint16_t nlen = get_u16(f);
        std::string name(nlen, '\0');
        f.read(name.data(), nlen);
        const int rank = f.get();
        Shape shape(static_cast<size_t>(rank));
        std::int64_t n = 1;
        for (int d = 0; d < rank; ++d) {
            shape[static_cast<size_t>(d)] = static_cast<int>(get_u64(f));
            n *= shape[static_cast<size_t>(d)];
        }
        std::vector<double> data(static_cast<size_t>(n));
        for (auto& v : data) v = static_cast<double>(get_f32(f));
        if (!f) throw std::runtime_error("checkpoint: truncated file " + path);
        out.emplace(name, Tensor::from_data(shape, std::move(data)));
    }
    return out;
}

void save_checkpoint(const std::string& path, const Model& model) {
    std::vector<std::pair<std::string, Tensor>> tensors;
    for (const auto* p : model.all_params()) tensors.emplace_back(p->name, p->tensor);
    write_checkpoint_tensors(path, tensors);
}

void load_checkpoint(const std::string& path, Model& model) {
    auto tensors = read_checkpoint_tensors(path);
    for (auto* p : model.all_params()) {
        auto it = tensors.find(p->name);
        if (it == tensors.end())
            throw std::runtime_error("checkpoint: missing tensor '" + p->name + "'");
        if (it->second.shape() != p->tensor.shape())
            throw std::runtime_error("checkpoint: shape mismatch for '" + p->name + "'");
        p->tensor.data() = it->second.data();  // in place, keeps graph identity
        p->tensor.zero_grad();
    }
}

// ---- SHA-256 ---------------------------------------------------------------

namespace {

struct Sha256 {
    std::array<uint32_t, 8> h = {0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a,
                                 0x510e527f, 0x9b05688c, 0x1f83d9ab, 0x5be0cd19};
    std::array<uint8_t, 64> buf{};
    size_t buf_len = 0;
    uint64_t total = 0;

    static uint32_t rotr(uint32_t x, int n) { return (x >> n) | (x << (32 - n)); }

    void block(const uint8_t* p) {
        static const uint32_t k[64] = {
            0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1,
            0x923f82a4, 0xab1c5ed5, 0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3,
            0x72be5d74, 0x80deb1fe, 0x9bdc06a7, 0xc19bf174, 0xe49b69c1, 0xefbe4786,
            0x0fc19dc6, 0x240ca1cc, 0x2de92c6f, 0x4a7484aa, 0x5cb0a9dc, 0x76f988da,
            0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7, 0xc6e00bf3, 0xd5a79147,
            0x06ca6351, 0x14292967, 0x27b70a85, 0x2e1b2138, 0x4d2c6dfc, 0x53380d13,
            0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85, 0xa2bfe8a1, 0xa81a664b,
            0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070,
            0x19a4c116, 0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a,
            0x5b9cca4f, 0x682e6ff3, 0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208,
            0x90befffa, 0xa4506ceb, 0xbef9a3f7, 0xc67178f2};
        uint32_t w[64];
        for (int i = 0; i < 16; ++i)
            w[i] = (static_cast<uint32_t>(p[4 * i]) << 24) | (p[4 * i + 1] << 16) |
                   (p[4 * i + 2] << 8) | p[4 * i + 3];
        for (int i = 16; i < 64; ++i) {
            const uint32_t s0 = rotr(w[i - 15], 7) ^ rotr(w[i - 15], 18) ^ (w[i - 15] >> 3);
            const uint32_t s1 = rotr(w[i - 2], 17) ^ rotr(w[i - 2], 19) ^ (w[i - 2] >> 10);
            w[i] = w[i - 16] + s0 + w[i - 7] + s1;
        }
        uint32_t a = h[0], b = h[1], c = h[2], d = h[3], e = h[4], f = h[5], g = h[6],
                 hh = h[7];
        for (int i = 0; i < 64; ++i) {
            const uint32_t s1 = rotr(e, 6) ^ rotr(e, 11) ^ rotr(e, 25);
            const uint32_t ch = (e & f) ^ (~e & g);
            const uint32_t t1 = hh + s1 + ch + k[i] + w[i];
            const uint32_t s0 = rotr(a, 2) ^ rotr(a, 13) ^ rotr(a, 22);
            const uint32_t maj = (a & b) ^ (a & c) ^ (b & c);
            const uint32_t t2 = s0 + maj;
            hh = g; g = f; f = e; e = d + t1;
            d = c; c = b; b = a; a = t1 + t2;
        }
        h[0] += a; h[1] += b; h[2] += c; h[3] += d;
        h[4] += e; h[5] += f; h[6] += g; h[7] += hh;
    }

    void update(const uint8_t* p, size_t n) {
        total += n;
        while (n > 0) {
            const size_t take = std::min(n, buf.size() - buf_len);
            std::memcpy(buf.data() + buf_len, p, take);
            buf_len += take;
            p += take;
            n -= take;
            if (buf_len == 64) {
                block(buf.data());
                buf_len = 0;
            }
        }
    }

    std::string finish() {
        const uint64_t bits = total * 8;
        const uint8_t one = 0x80;
        update(&one, 1);
        const uint8_t zero = 0;
        while (buf_len != 56) update(&zero, 1);
        uint8_t len[8];
        for (int i = 0; i < 8; ++i) len[i] = static_cast<uint8_t>(bits >> (56 - 8 * i));
        update(len, 8);
        static const char* hex = "0123456789abcdef";
        std::string out;
        for (uint32_t v : h)
            for (int i = 28; i >= 0; i -= 4) out += hex[(v >> i) & 0xf];
        return out;
    }
};

}  // namespace

std::string sha256_bytes(const void* data, size_t len) {
    Sha256 s;
    s.update(static_cast<const uint8_t*>(data), len);
    return s.finish();
}

std::string sha256_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("sha256: cannot open " + path);
    Sha256 s;
    std::vector<char> buf(1 << 16);
    while (f) {
        f.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        s.update(reinterpret_cast<const uint8_t*>(buf.data()),
                 static_cast<size_t>(f.gcount()));
    }
    return s.finish();
}

}  // namespace disendiff
