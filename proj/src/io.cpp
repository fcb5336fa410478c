#include "odt/io.hpp"

#include <array>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace odt {

namespace {

constexpr std::uint32_t kOdtrVersion = 1;
constexpr std::uint32_t kCheckpointVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

// Cursor with bounds-checked little-endian reads; every failure carries the
// byte offset so truncations are diagnosable.
struct Reader {
    const std::string& buf;
    std::size_t pos = 0;
    std::string path;

    void need(std::size_t n, const char* what) {
        if (pos + n > buf.size())
            throw FormatError(path + ": truncated " + what + " at offset " + std::to_string(pos));
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    float f32(const char* what) {
        const std::uint32_t bits = u32(what);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    std::string bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace

void atomic_write_file(const std::string& path, const std::string& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw FormatError("cannot open " + tmp + " for writing");
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw FormatError("short write to " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw FormatError("rename " + tmp + " -> " + path + ": " + ec.message());
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open " + path);
    std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return s;
}

nlohmann::json read_json_file(const std::string& path) {
    const std::string s = read_file(path);
    nlohmann::json j = nlohmann::json::parse(s, nullptr, false);
    if (j.is_discarded()) throw FormatError(path + ": invalid JSON");
    return j;
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
    atomic_write_file(path, j.dump(2) + "\n");
}

// --- ODTR container ---------------------------------------------------------

void odtr_write(const std::string& path, const OdtrArray& array) {
    const std::uint64_t n = array.elem_count();
    const std::uint64_t per_elem = array.dtype == OdtrDtype::kComplex64 ? 2 : 1;
    if (array.data.size() != n * per_elem)
        throw UsageError("odtr_write: payload has " + std::to_string(array.data.size()) +
                         " floats, dims imply " + std::to_string(n * per_elem));
    std::string out;
    out += "ODTR";
    put_u32(out, kOdtrVersion);
    put_u32(out, static_cast<std::uint32_t>(array.dtype));
    put_u32(out, static_cast<std::uint32_t>(array.dims.size()));
    for (auto d : array.dims) put_u64(out, d);
    const std::string meta = array.meta.is_null() ? "{}" : array.meta.dump();
    put_u64(out, meta.size());
    out += meta;
    out.reserve(out.size() + array.data.size() * 4);
    for (float v : array.data) put_f32(out, v);
    atomic_write_file(path, out);
}

OdtrArray odtr_read(const std::string& path) {
    const std::string buf = read_file(path);
    Reader r{buf, 0, path};
    if (r.bytes(4, "magic") != "ODTR") throw FormatError(path + ": bad magic, not an ODTR file");
    const std::uint32_t version = r.u32("version");
    if (version != kOdtrVersion)
        throw FormatError(path + ": unsupported ODTR version " + std::to_string(version));
    OdtrArray a;
    const std::uint32_t dtype = r.u32("dtype");
    if (dtype > 1) throw FormatError(path + ": unknown dtype tag " + std::to_string(dtype));
    a.dtype = static_cast<OdtrDtype>(dtype);
    const std::uint32_t ndim = r.u32("ndim");
    if (ndim > 16) throw FormatError(path + ": implausible rank " + std::to_string(ndim));
    a.dims.resize(ndim);
    for (auto& d : a.dims) d = r.u64("dims");
    const std::uint64_t meta_len = r.u64("meta length");
    const std::string meta = r.bytes(meta_len, "meta JSON");
    a.meta = nlohmann::json::parse(meta, nullptr, false);
    if (a.meta.is_discarded()) throw FormatError(path + ": invalid meta JSON");
    const std::uint64_t per_elem = a.dtype == OdtrDtype::kComplex64 ? 2 : 1;
    const std::uint64_t count = a.elem_count() * per_elem;
    if (buf.size() - r.pos != count * 4)
        throw FormatError(path + ": payload length " + std::to_string(buf.size() - r.pos) +
                          " does not match dims (expect " + std::to_string(count * 4) +
                          " bytes at offset " + std::to_string(r.pos) + ")");
    a.data.resize(count);
    for (auto& v : a.data) v = r.f32("payload");
    return a;
}

OdtrArray raw_to_odtr(const RawBScan& raw) {
    OdtrArray a;
    a.dtype = OdtrDtype::kComplex64;
    a.dims = {static_cast<std::uint64_t>(raw.k_freq), static_cast<std::uint64_t>(raw.width)};
    a.meta = {{"delta", raw.delta}, {"scan_id", raw.scan_id}, {"kind", "raw_bscan"}};
    a.data.resize(raw.data.size() * 2);
    for (std::size_t i = 0; i < raw.data.size(); ++i) {
        a.data[2 * i] = static_cast<float>(raw.data[i].real());
        a.data[2 * i + 1] = static_cast<float>(raw.data[i].imag());
    }
    return a;
}

RawBScan odtr_to_raw(const OdtrArray& array) {
    if (array.dtype != OdtrDtype::kComplex64 || array.dims.size() != 2)
        throw FormatError("raw B-scan must be a rank-2 complex64 ODTR array");
    RawBScan raw;
    raw.k_freq = static_cast<int>(array.dims[0]);
    raw.width = static_cast<int>(array.dims[1]);
    raw.delta = array.meta.value("delta", 1);
    raw.scan_id = array.meta.value("scan_id", std::string());
    raw.data.resize(array.elem_count());
    for (std::size_t i = 0; i < raw.data.size(); ++i)
        raw.data[i] = {static_cast<double>(array.data[2 * i]), static_cast<double>(array.data[2 * i + 1])};
    return raw;
}

OdtrArray flow_to_odtr(const FlowMap& flow) {
    OdtrArray a;
    a.dtype = OdtrDtype::kF32;
    a.dims = {static_cast<std::uint64_t>(flow.depth), static_cast<std::uint64_t>(flow.width)};
    a.meta = {{"kind", "flow_map"}};
    a.data.assign(flow.values.begin(), flow.values.end());
    return a;
}

FlowMap odtr_to_flow(const OdtrArray& array) {
    if (array.dtype != OdtrDtype::kF32 || array.dims.size() != 2)
        throw FormatError("flow map must be a rank-2 f32 ODTR array");
    FlowMap f;
    f.depth = static_cast<int>(array.dims[0]);
    f.width = static_cast<int>(array.dims[1]);
    f.values.assign(array.data.begin(), array.data.end());
    return f;
}

// --- CRC32 (IEEE 802.3, reflected) ------------------------------------------

std::uint32_t crc32(const std::uint8_t* data, std::size_t len, std::uint32_t seed) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t c = seed ^ 0xffffffffu;
    for (std::size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xff] ^ (c >> 8);
    return c ^ 0xffffffffu;
}

// --- ASSN checkpoint ---------------------------------------------------------

void checkpoint_save(const std::string& path, const nlohmann::json& config,
                     const std::vector<NamedTensorF>& tensors) {
    std::string payload;
    std::string table;
    put_u32(table, static_cast<std::uint32_t>(tensors.size()));
    std::uint64_t offset = 0;
    for (const auto& t : tensors) {
        std::uint64_t n = 1;
        for (auto d : t.dims) n *= d;
        if (t.data.size() != n)
            throw UsageError("checkpoint_save: tensor " + t.name + " has " +
                             std::to_string(t.data.size()) + " values, dims imply " + std::to_string(n));
        put_u32(table, static_cast<std::uint32_t>(t.name.size()));
        table += t.name;
        put_u32(table, static_cast<std::uint32_t>(t.dims.size()));
        for (auto d : t.dims) put_u64(table, d);
        put_u64(table, offset);
        for (float v : t.data) put_f32(payload, v);
        offset += n * 4;
    }
    std::string out;
    out += "ASSN";
    put_u32(out, kCheckpointVersion);
    const std::string cfg = config.dump();
    put_u64(out, cfg.size());
    out += cfg;
    out += table;
    put_u64(out, payload.size());
    out += payload;
    put_u32(out, crc32(reinterpret_cast<const std::uint8_t*>(payload.data()), payload.size()));
    atomic_write_file(path, out);
}

Checkpoint checkpoint_load(const std::string& path) {
    const std::string buf = read_file(path);
    Reader r{buf, 0, path};
    if (r.bytes(4, "magic") != "ASSN") throw FormatError(path + ": bad magic, not a checkpoint");
    const std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion)
        throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
    Checkpoint ck;
    const std::uint64_t cfg_len = r.u64("config length");
    const std::string cfg = r.bytes(cfg_len, "config JSON");
    ck.config = nlohmann::json::parse(cfg, nullptr, false);
    if (ck.config.is_discarded()) throw FormatError(path + ": invalid config JSON");
    const std::uint32_t n_tensors = r.u32("tensor count");
    struct Entry {
        std::string name;
        std::vector<std::uint64_t> dims;
        std::uint64_t offset;
        std::uint64_t count;
    };
    std::vector<Entry> entries(n_tensors);
    for (auto& e : entries) {
        const std::uint32_t name_len = r.u32("tensor name length");
        e.name = r.bytes(name_len, "tensor name");
        const std::uint32_t ndim = r.u32("tensor rank");
        if (ndim > 16) throw FormatError(path + ": implausible tensor rank for " + e.name);
        e.dims.resize(ndim);
        e.count = 1;
        for (auto& d : e.dims) {
            d = r.u64("tensor dims");
            e.count *= d;
        }
        e.offset = r.u64("tensor offset");
    }
    const std::uint64_t payload_len = r.u64("payload length");
    const std::size_t payload_pos = r.pos;
    const std::string payload = r.bytes(payload_len, "payload");
    const std::uint32_t stored = r.u32("payload CRC32");
    const std::uint32_t computed =
        crc32(reinterpret_cast<const std::uint8_t*>(payload.data()), payload.size());
    if (stored != computed)
        throw FormatError(path + ": payload CRC mismatch (stored " + std::to_string(stored) +
                          ", computed " + std::to_string(computed) + ")");
    ck.tensors.resize(n_tensors);
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        auto& e = entries[i];
        auto& t = ck.tensors[i];
        t.name = std::move(e.name);
        t.dims = std::move(e.dims);
        if (e.offset + e.count * 4 > payload_len)
            throw FormatError(path + ": tensor " + t.name + " overruns payload at offset " +
                              std::to_string(payload_pos + e.offset));
        t.data.resize(e.count);
        Reader pr{payload, static_cast<std::size_t>(e.offset), path};
        for (auto& v : t.data) v = pr.f32("tensor payload");
    }
    return ck;
}

// --- images -------------------------------------------------------------------

void write_pgm16(const std::string& path, int width, int height, const std::vector<double>& values) {
    if (width < 1 || height < 1 || static_cast<std::size_t>(width) * height != values.size())
        throw UsageError("write_pgm16: size mismatch");
    std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n65535\n";
    for (double v : values) {
        const double c = std::clamp(v, 0.0, 1.0);
        const auto u = static_cast<std::uint16_t>(c * 65535.0 + 0.5);
        out.push_back(static_cast<char>(u >> 8));  // PGM is big-endian
        out.push_back(static_cast<char>(u & 0xff));
    }
    atomic_write_file(path, out);
}

namespace {

std::uint32_t adler32(const std::uint8_t* data, std::size_t len) {
    std::uint32_t a = 1, b = 0;
    for (std::size_t i = 0; i < len; ++i) {
        a = (a + data[i]) % 65521u;
        b = (b + a) % 65521u;
    }
    return (b << 16) | a;
}

void put_be32(std::string& out, std::uint32_t v) {
    for (int i = 3; i >= 0; --i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void png_chunk(std::string& out, const char type[4], const std::string& body) {
    put_be32(out, static_cast<std::uint32_t>(body.size()));
    std::string tb(type, 4);
    tb += body;
    out += tb;
    put_be32(out, crc32(reinterpret_cast<const std::uint8_t*>(tb.data()), tb.size()));
}

}  // namespace

void write_png_gray8(const std::string& path, int width, int height,
                     const std::vector<std::uint8_t>& pixels) {
    if (width < 1 || height < 1 || static_cast<std::size_t>(width) * height != pixels.size())
        throw UsageError("write_png_gray8: size mismatch");
    std::string out("\x89PNG\r\n\x1a\n", 8);
    std::string ihdr;
    put_be32(ihdr, static_cast<std::uint32_t>(width));
    put_be32(ihdr, static_cast<std::uint32_t>(height));
    ihdr += std::string("\x08\x00\x00\x00\x00", 5);  // 8-bit grayscale, no interlace
    png_chunk(out, "IHDR", ihdr);

    // scanlines with filter byte 0
    std::string raster;
    raster.reserve(static_cast<std::size_t>(height) * (width + 1));
    for (int y = 0; y < height; ++y) {
        raster.push_back('\0');
        raster.append(reinterpret_cast<const char*>(pixels.data()) +
                          static_cast<std::size_t>(y) * width,
                      static_cast<std::size_t>(width));
    }
    // zlib stream of stored (uncompressed) deflate blocks
    std::string z("\x78\x01", 2);
    const std::size_t kBlock = 65535;
    for (std::size_t off = 0; off < raster.size(); off += kBlock) {
        const std::size_t n = std::min(kBlock, raster.size() - off);
        const bool last = off + n == raster.size();
        z.push_back(last ? '\x01' : '\x00');
        z.push_back(static_cast<char>(n & 0xff));
        z.push_back(static_cast<char>(n >> 8));
        z.push_back(static_cast<char>(~n & 0xff));
        z.push_back(static_cast<char>((~n >> 8) & 0xff));
        z.append(raster, off, n);
    }
    put_be32(z, adler32(reinterpret_cast<const std::uint8_t*>(raster.data()), raster.size()));
    png_chunk(out, "IDAT", z);
    png_chunk(out, "IEND", "");
    atomic_write_file(path, out);
}

void write_flow_png(const std::string& path, const FlowMap& flow, double vmax) {
    double m = vmax;
    if (m <= 0.0) {
        for (double v : flow.values) m = std::max(m, std::abs(v));
        if (m == 0.0) m = 1.0;
    }
    std::vector<std::uint8_t> px(flow.values.size());
    for (std::size_t i = 0; i < px.size(); ++i) {
        const double u = std::clamp(flow.values[i] / m, -1.0, 1.0) * 0.5 + 0.5;
        px[i] = static_cast<std::uint8_t>(u * 255.0 + 0.5);
    }
    write_png_gray8(path, flow.width, flow.depth, px);
}

}  // namespace odt
