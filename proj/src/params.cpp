#include "fedmol/params.hpp"

#include <algorithm>
#include <fstream>

#include "fedmol/error.hpp"
#include "fedmol/wire.hpp"

namespace fedmol {

std::uint64_t shape_elements(std::span<const std::uint64_t> shape) {
    std::uint64_t n = 1;
    for (std::uint64_t d : shape) n *= d;
    return n;
}

void ParamStore::add(std::string name, std::vector<std::uint64_t> shape, std::vector<float> values) {
    if (shape_elements(shape) != values.size())
        fail(ErrorKind::ShapeMismatch, "tensor '" + name + "': shape implies " +
                                           std::to_string(shape_elements(shape)) + " values, got " +
                                           std::to_string(values.size()));
    auto it = std::lower_bound(entries_.begin(), entries_.end(), name,
                               [](const Entry& e, const std::string& key) { return e.name < key; });
    if (it != entries_.end() && it->name == name)
        fail(ErrorKind::DuplicateTensorName, "tensor '" + name + "' already present");
    entries_.insert(it, Entry{std::move(name), std::move(shape), std::move(values)});
}

const ParamStore::Entry* ParamStore::find(const std::string& name) const {
    auto it = std::lower_bound(entries_.begin(), entries_.end(), name,
                               [](const Entry& e, const std::string& key) { return e.name < key; });
    if (it == entries_.end() || it->name != name) return nullptr;
    return &*it;
}

ParamStore::Entry* ParamStore::find(const std::string& name) {
    return const_cast<Entry*>(static_cast<const ParamStore*>(this)->find(name));
}

std::size_t ParamStore::value_count() const {
    std::size_t n = 0;
    for (const Entry& e : entries_) n += e.values.size();
    return n;
}

std::vector<float> ParamStore::flatten() const {
    std::vector<float> flat;
    flat.reserve(value_count());
    for (const Entry& e : entries_) flat.insert(flat.end(), e.values.begin(), e.values.end());
    return flat;
}

ParamStore ParamStore::unflatten(std::span<const float> flat) const {
    if (flat.size() != value_count())
        fail(ErrorKind::ShapeMismatch, "flat vector has " + std::to_string(flat.size()) + " values, store needs " +
                                           std::to_string(value_count()));
    ParamStore out;
    std::size_t at = 0;
    for (const Entry& e : entries_) {
        std::vector<float> vals(flat.begin() + static_cast<std::ptrdiff_t>(at),
                                flat.begin() + static_cast<std::ptrdiff_t>(at + e.values.size()));
        at += e.values.size();
        out.add(e.name, e.shape, std::move(vals));
    }
    return out;
}

bool ParamStore::congruent_with(const ParamStore& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i)
        if (entries_[i].name != other.entries_[i].name || entries_[i].shape != other.entries_[i].shape) return false;
    return true;
}

void write_fpk(const ParamStore& store, const std::string& path) {
    std::vector<std::uint8_t> bytes;
    encode_param_store(store, bytes);
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::UnreadableFile, "cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::UnreadableFile, "short write to '" + path + "'");
}

ParamStore read_fpk(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::UnreadableFile, "cannot open '" + path + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    ByteReader reader(bytes);
    ParamStore store = decode_param_store(reader);
    if (!reader.at_end()) fail(ErrorKind::TruncatedPayload, "trailing bytes after tensor block in '" + path + "'");
    return store;
}

} // namespace fedmol
