#pragma once

// On-disk formats: the ODTR array container, the ASSN checkpoint file,
// JSON helpers and simple image writers (16-bit PGM, 8-bit grayscale PNG).
// All writes go through a temp file + rename so readers never observe a
// partially written file.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "odt/common.hpp"
#include "odt/signal.hpp"

namespace odt {

enum class OdtrDtype : std::uint32_t { kF32 = 0, kComplex64 = 1 };

// Self-describing n-d array. Complex data is stored interleaved
// (re, im, re, im, ...), so `data` holds 2x the element count.
struct OdtrArray {
    OdtrDtype dtype = OdtrDtype::kF32;
    std::vector<std::uint64_t> dims;
    nlohmann::json meta;  // stride, seed, scan id, free-form
    std::vector<float> data;

    std::uint64_t elem_count() const {
        std::uint64_t n = 1;
        for (auto d : dims) n *= d;
        return n;
    }
};

void odtr_write(const std::string& path, const OdtrArray& array);
OdtrArray odtr_read(const std::string& path);

// Conversions between the container and the in-memory signal types.
OdtrArray raw_to_odtr(const RawBScan& raw);
RawBScan odtr_to_raw(const OdtrArray& array);
OdtrArray flow_to_odtr(const FlowMap& flow);
FlowMap odtr_to_flow(const OdtrArray& array);

// Named f32 tensor blob inside a checkpoint.
struct NamedTensorF {
    std::string name;
    std::vector<std::uint64_t> dims;
    std::vector<float> data;
};

struct Checkpoint {
    nlohmann::json config;
    std::vector<NamedTensorF> tensors;
};

void checkpoint_save(const std::string& path, const nlohmann::json& config,
                     const std::vector<NamedTensorF>& tensors);
Checkpoint checkpoint_load(const std::string& path);

std::uint32_t crc32(const std::uint8_t* data, std::size_t len, std::uint32_t seed = 0);

void atomic_write_file(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path);
nlohmann::json read_json_file(const std::string& path);
void write_json_file(const std::string& path, const nlohmann::json& j);

// 16-bit binary PGM; values clamped to [0, 1] and scaled to 65535.
void write_pgm16(const std::string& path, int width, int height, const std::vector<double>& values);

// Minimal 8-bit grayscale PNG (stored deflate blocks, no compression).
void write_png_gray8(const std::string& path, int width, int height,
                     const std::vector<std::uint8_t>& pixels);

// Renders a flow map to PNG, mapping [-vmax, vmax] to black..white
// (vmax <= 0 autoscales to max |value|).
void write_flow_png(const std::string& path, const FlowMap& flow, double vmax = 0.0);

}  // namespace odt
