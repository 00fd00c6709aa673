#include "fedmol/wire.hpp"

#include <bit>
#include <cstring>
#include <limits>

#include "fedmol/error.hpp"

namespace fedmol {

namespace {

constexpr std::uint8_t kMagic[4] = {'F', 'D', 'M', '1'};

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

} // namespace

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }
void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) { put_le(out, v); }
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) { put_le(out, v); }
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) { put_le(out, v); }

void put_f32(std::vector<std::uint8_t>& out, float v) { put_le(out, std::bit_cast<std::uint32_t>(v)); }
void put_f64(std::vector<std::uint8_t>& out, double v) { put_le(out, std::bit_cast<std::uint64_t>(v)); }

void put_str16(std::vector<std::uint8_t>& out, const std::string& s) {
    if (s.size() > std::numeric_limits<std::uint16_t>::max())
        fail(ErrorKind::Internal, "string too long for u16 length prefix");
    put_u16(out, static_cast<std::uint16_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
}

void ByteReader::need(std::size_t n) {
    if (bytes_.size() - at_ < n) fail(ErrorKind::TruncatedPayload, "payload ends mid-field");
}

std::uint8_t ByteReader::u8() {
    need(1);
    return bytes_[at_++];
}

std::uint16_t ByteReader::u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(bytes_[at_] | (bytes_[at_ + 1] << 8));
    at_ += 2;
    return v;
}

std::uint32_t ByteReader::u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | bytes_[at_ + static_cast<std::size_t>(i)];
    at_ += 4;
    return v;
}

std::uint64_t ByteReader::u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | bytes_[at_ + static_cast<std::size_t>(i)];
    at_ += 8;
    return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }
double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::string ByteReader::str16() {
    std::uint16_t len = u16();
    need(len);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + at_), len);
    at_ += len;
    return s;
}

void encode_param_store(const ParamStore& store, std::vector<std::uint8_t>& out) {
    put_u32(out, static_cast<std::uint32_t>(store.size()));
    for (const ParamStore::Entry& e : store) {
        put_str16(out, e.name);
        put_u8(out, static_cast<std::uint8_t>(e.shape.size()));
        for (std::uint64_t d : e.shape) put_u64(out, d);
        for (float v : e.values) put_f32(out, v);
    }
}

ParamStore decode_param_store(ByteReader& reader) {
    std::uint32_t count = reader.u32();
    ParamStore store;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = reader.str16();
        std::uint8_t rank = reader.u8();
        std::vector<std::uint64_t> shape(rank);
        for (std::uint8_t r = 0; r < rank; ++r) shape[r] = reader.u64();
        std::uint64_t n = shape_elements(shape);
        if (reader.remaining() < n * 4) fail(ErrorKind::TruncatedPayload, "tensor '" + name + "' values cut short");
        std::vector<float> values(n);
        for (std::uint64_t v = 0; v < n; ++v) values[v] = reader.f32();
        // ParamStore::add throws DuplicateTensorName on repeats.
        store.add(std::move(name), std::move(shape), std::move(values));
    }
    return store;
}

std::vector<std::uint8_t> encode_update(const ModelUpdate& update) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
    put_u16(out, kWireVersion);
    put_str16(out, update.collaborator_id);
    put_u64(out, update.train_sample_count);
    put_u16(out, static_cast<std::uint16_t>(update.metrics.size()));
    for (const auto& [name, value] : update.metrics) { // std::map iterates sorted
        put_str16(out, name);
        put_f64(out, value);
    }
    encode_param_store(update.denoiser_params, out);
    encode_param_store(update.regressor_params, out);
    return out;
}

ModelUpdate decode_update(std::span<const std::uint8_t> bytes) {
    ByteReader reader(bytes);
    if (reader.remaining() < 4) fail(ErrorKind::TruncatedPayload, "payload shorter than magic");
    for (std::uint8_t expected : kMagic)
        if (reader.u8() != expected) fail(ErrorKind::BadMagic, "payload does not start with FDM1");
    std::uint16_t version = reader.u16();
    if (version != kWireVersion)
        fail(ErrorKind::UnsupportedVersion, "wire version " + std::to_string(version) + ", expected " +
                                                std::to_string(kWireVersion));
    ModelUpdate update;
    update.collaborator_id = reader.str16();
    update.train_sample_count = reader.u64();
    std::uint16_t metric_count = reader.u16();
    for (std::uint16_t i = 0; i < metric_count; ++i) {
        std::string name = reader.str16();
        double value = reader.f64();
        update.metrics.emplace(std::move(name), value);
    }
    update.denoiser_params = decode_param_store(reader);
    update.regressor_params = decode_param_store(reader);
    if (!reader.at_end()) fail(ErrorKind::TruncatedPayload, "trailing bytes after update payload");
    return update;
}

} // namespace fedmol
