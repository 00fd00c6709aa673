#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fedmol/params.hpp"

namespace fedmol {

/// Everything a collaborator sends back to the aggregator after a round.
/// This is also the only payload the aggregator ever sends down (with the
/// global parameters and an empty metrics map), so one codec covers both
/// directions.
struct ModelUpdate {
    std::string collaborator_id;
    std::uint64_t train_sample_count = 0;
    std::map<std::string, double> metrics;
    ParamStore denoiser_params;
    ParamStore regressor_params;

    bool operator==(const ModelUpdate&) const = default;
};

inline constexpr std::uint16_t kWireVersion = 1;

/// Bounds-checked little-endian reader over a byte buffer.
class ByteReader {
  public:
    explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::uint8_t u8();
    std::uint16_t u16();
    std::uint32_t u32();
    std::uint64_t u64();
    float f32();
    double f64();
    std::string str16();
    bool at_end() const { return at_ == bytes_.size(); }
    std::size_t remaining() const { return bytes_.size() - at_; }

  private:
    void need(std::size_t n);

    std::span<const std::uint8_t> bytes_;
    std::size_t at_ = 0;
};

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v);
void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v);
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v);
void put_f32(std::vector<std::uint8_t>& out, float v);
void put_f64(std::vector<std::uint8_t>& out, double v);
void put_str16(std::vector<std::uint8_t>& out, const std::string& s);

void encode_param_store(const ParamStore& store, std::vector<std::uint8_t>& out);
ParamStore decode_param_store(ByteReader& reader);

std::vector<std::uint8_t> encode_update(const ModelUpdate& update);
ModelUpdate decode_update(std::span<const std::uint8_t> bytes);

} // namespace fedmol
