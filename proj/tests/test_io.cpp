#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "odt/common.hpp"
#include "odt/io.hpp"

using namespace odt;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    auto dir = fs::temp_directory_path() / "odt_io_test";
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) { return read_file(p.string()); }

void patch_byte(const fs::path& p, std::size_t offset, char value) {
    std::string s = slurp(p);
    s[offset] = value;
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    f.write(s.data(), static_cast<std::streamsize>(s.size()));
}

// Parses the stored-deflate IDAT stream of our own PNG writer and returns the
// filtered raster (scanline filter bytes stripped).
std::vector<std::uint8_t> png_raster(const std::string& bytes, int& width, int& height) {
    REQUIRE(bytes.substr(1, 3) == "PNG");
    auto be32 = [&](std::size_t at) {
        return (static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[at])) << 24) |
               (static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[at + 1])) << 16) |
               (static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[at + 2])) << 8) |
               static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[at + 3]));
    };
    width = static_cast<int>(be32(16));
    height = static_cast<int>(be32(20));
    // walk chunks to find IDAT
    std::size_t pos = 8;
    std::string z;
    while (pos + 8 <= bytes.size()) {
        const std::uint32_t len = be32(pos);
        const std::string type = bytes.substr(pos + 4, 4);
        if (type == "IDAT") z += bytes.substr(pos + 8, len);
        pos += 12 + len;
    }
    REQUIRE(!z.empty());
    // skip the 2-byte zlib header, then read stored blocks
    std::size_t zp = 2;
    std::string raster;
    bool last = false;
    while (!last) {
        last = z[zp] & 1;
        const std::size_t n = static_cast<std::uint8_t>(z[zp + 1]) |
                              (static_cast<std::size_t>(static_cast<std::uint8_t>(z[zp + 2])) << 8);
        raster += z.substr(zp + 5, n);
        zp += 5 + n;
    }
    std::vector<std::uint8_t> px;
    for (int y = 0; y < height; ++y) {
        REQUIRE(raster[static_cast<std::size_t>(y) * (width + 1)] == 0);  // filter none
        for (int x = 0; x < width; ++x)
            px.push_back(static_cast<std::uint8_t>(raster[static_cast<std::size_t>(y) * (width + 1) + 1 + x]));
    }
    return px;
}

}  // namespace

TEST_CASE("odtr f32 arrays round trip with metadata") {
    auto path = (temp_dir() / "a.odtr").string();
    OdtrArray a;
    a.dtype = OdtrDtype::kF32;
    a.dims = {3, 4};
    a.meta = {{"delta", 2}, {"scan_id", "scan_0001"}};
    a.data.resize(12);
    for (int i = 0; i < 12; ++i) a.data[i] = 0.25f * i - 1.0f;
    odtr_write(path, a);
    auto b = odtr_read(path);
    CHECK(b.dtype == OdtrDtype::kF32);
    CHECK(b.dims == a.dims);
    CHECK(b.data == a.data);
    CHECK(b.meta["delta"] == 2);
    CHECK(b.meta["scan_id"] == "scan_0001");

    // writes are deterministic byte for byte
    auto path2 = (temp_dir() / "a2.odtr").string();
    odtr_write(path2, a);
    CHECK(slurp(path) == slurp(path2));
    CHECK_FALSE(fs::exists(path + ".tmp"));
}

TEST_CASE("odtr complex64 arrays round trip both components") {
    RawBScan raw;
    raw.k_freq = 4;
    raw.width = 2;
    raw.delta = 2;
    raw.scan_id = "s7";
    raw.data = {{1, -1}, {2, -2}, {3, -3}, {4, -4}, {5, -5}, {6, -6}, {7, -7}, {8, -8}};
    auto path = (temp_dir() / "c.odtr").string();
    odtr_write(path, raw_to_odtr(raw));
    auto back = odtr_to_raw(odtr_read(path));
    CHECK(back.k_freq == 4);
    CHECK(back.width == 2);
    CHECK(back.delta == 2);
    CHECK(back.scan_id == "s7");
    CHECK(back.data == raw.data);
}

TEST_CASE("odtr reader rejects malformed files with diagnostics") {
    auto dir = temp_dir();
    OdtrArray a;
    a.dims = {2, 2};
    a.data = {1, 2, 3, 4};
    const auto good = (dir / "good.odtr").string();
    odtr_write(good, a);
    const std::string bytes = slurp(good);

    const auto bad_magic = dir / "bad_magic.odtr";
    atomic_write_file(bad_magic.string(), "NOPE" + bytes.substr(4));
    CHECK_THROWS_AS(odtr_read(bad_magic.string()), FormatError);

    const auto bad_version = dir / "bad_version.odtr";
    atomic_write_file(bad_version.string(), bytes);
    patch_byte(bad_version, 4, 9);
    CHECK_THROWS_AS(odtr_read(bad_version.string()), FormatError);

    const auto truncated = dir / "trunc.odtr";
    atomic_write_file(truncated.string(), bytes.substr(0, bytes.size() - 5));
    CHECK_THROWS_AS(odtr_read(truncated.string()), FormatError);

    const auto tiny = dir / "tiny.odtr";
    atomic_write_file(tiny.string(), "OD");
    CHECK_THROWS_AS(odtr_read(tiny.string()), FormatError);

    CHECK_THROWS_AS(odtr_read((dir / "missing.odtr").string()), FormatError);

    OdtrArray wrong = a;
    wrong.data.pop_back();
    CHECK_THROWS_AS(odtr_write((dir / "w.odtr").string(), wrong), UsageError);
}

TEST_CASE("checkpoints round trip and verify their payload CRC") {
    auto dir = temp_dir();
    nlohmann::json cfg = {{"channels", 16}, {"groups", 2}};
    std::vector<NamedTensorF> tensors;
    tensors.push_back({"conv_in.weight", {16, 2, 3, 3}, std::vector<float>(16 * 2 * 3 * 3, 0.5f)});
    tensors.push_back({"conv_in.bias", {16}, std::vector<float>(16, -1.0f)});
    for (std::size_t i = 0; i < tensors[0].data.size(); ++i)
        tensors[0].data[i] = static_cast<float>(i) * 0.01f;

    const auto path = (dir / "m.assn").string();
    checkpoint_save(path, cfg, tensors);
    auto ck = checkpoint_load(path);
    CHECK(ck.config == cfg);
    REQUIRE(ck.tensors.size() == 2);
    CHECK(ck.tensors[0].name == "conv_in.weight");
    CHECK(ck.tensors[0].dims == tensors[0].dims);
    CHECK(ck.tensors[0].data == tensors[0].data);
    CHECK(ck.tensors[1].data == tensors[1].data);

    // flip one payload byte: CRC must catch it
    const std::string bytes = slurp(path);
    const auto corrupted = dir / "corrupt.assn";
    atomic_write_file(corrupted.string(), bytes);
    patch_byte(corrupted, bytes.size() - 10, static_cast<char>(bytes[bytes.size() - 10] ^ 0x40));
    CHECK_THROWS_AS(checkpoint_load(corrupted.string()), FormatError);

    const auto not_ck = dir / "not.assn";
    atomic_write_file(not_ck.string(), "ODTRxxxx");
    CHECK_THROWS_AS(checkpoint_load(not_ck.string()), FormatError);
}

TEST_CASE("crc32 matches the IEEE reference value") {
    const std::string s = "123456789";
    CHECK(crc32(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()) == 0xcbf43926u);
}

TEST_CASE("pgm16 writes big-endian binary P5") {
    auto path = (temp_dir() / "img.pgm").string();
    write_pgm16(path, 2, 1, {0.0, 1.0});
    const std::string bytes = slurp(path);
    const std::string header = "P5\n2 1\n65535\n";
    REQUIRE(bytes.size() == header.size() + 4);
    CHECK(bytes.substr(0, header.size()) == header);
    CHECK(static_cast<std::uint8_t>(bytes[header.size() + 0]) == 0x00);
    CHECK(static_cast<std::uint8_t>(bytes[header.size() + 1]) == 0x00);
    CHECK(static_cast<std::uint8_t>(bytes[header.size() + 2]) == 0xff);
    CHECK(static_cast<std::uint8_t>(bytes[header.size() + 3]) == 0xff);
}

TEST_CASE("png writer produces a decodable stored-deflate grayscale image") {
    auto path = (temp_dir() / "img.png").string();
    std::vector<std::uint8_t> px = {0, 64, 128, 255, 10, 20};
    write_png_gray8(path, 3, 2, px);
    const std::string bytes = slurp(path);
    int w = 0, h = 0;
    auto back = png_raster(bytes, w, h);
    CHECK(w == 3);
    CHECK(h == 2);
    CHECK(back == px);
    CHECK(bytes.substr(bytes.size() - 8, 4) == "IEND");
}

TEST_CASE("flow png maps the symmetric range onto gray levels") {
    FlowMap f;
    f.depth = 1;
    f.width = 3;
    f.values = {-2.0, 0.0, 2.0};
    auto path = (temp_dir() / "flow.png").string();
    write_flow_png(path, f);
    int w = 0, h = 0;
    auto px = png_raster(slurp(path), w, h);
    REQUIRE(px.size() == 3);
    CHECK(px[0] == 0);
    CHECK(px[1] == 128);
    CHECK(px[2] == 255);
}

TEST_CASE("json helpers reject invalid files") {
    auto dir = temp_dir();
    const auto p = (dir / "x.json").string();
    write_json_file(p, {{"a", 1}});
    CHECK(read_json_file(p)["a"] == 1);
    atomic_write_file(p, "{not json");
    CHECK_THROWS_AS(read_json_file(p), FormatError);
}
