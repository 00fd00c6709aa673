#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace fedmol {

/// Named tensor container. Entries are kept sorted by name so that
/// iteration, flatten() and the wire encoding share one canonical order.
class ParamStore {
  public:
    struct Entry {
        std::string name;
        std::vector<std::uint64_t> shape;
        std::vector<float> values;

        bool operator==(const Entry&) const = default;
    };

    void add(std::string name, std::vector<std::uint64_t> shape, std::vector<float> values);

    bool empty() const { return entries_.empty(); }
    std::size_t size() const { return entries_.size(); }
    const Entry& entry(std::size_t i) const { return entries_[i]; }
    Entry& entry(std::size_t i) { return entries_[i]; }
    const Entry* find(const std::string& name) const;
    Entry* find(const std::string& name);

    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    std::size_t value_count() const;

    /// Concatenates all values in name order.
    std::vector<float> flatten() const;

    /// Rebuilds a store with this store's names/shapes from a flat vector.
    /// flatten(unflatten(s, v)) == v bit for bit.
    ParamStore unflatten(std::span<const float> flat) const;

    bool congruent_with(const ParamStore& other) const;

    bool operator==(const ParamStore&) const = default;

  private:
    std::vector<Entry> entries_;
};

/// Element count implied by a shape (empty shape = scalar, 1 element).
std::uint64_t shape_elements(std::span<const std::uint64_t> shape);

void write_fpk(const ParamStore& store, const std::string& path);
ParamStore read_fpk(const std::string& path);

} // namespace fedmol
