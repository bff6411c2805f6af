#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rndlm/tensor.hpp"

namespace rndlm {

// Named trainable leaves. Ordered by name so iteration (and therefore
// serialization, hashing and finite differencing) is deterministic.
class ParameterStore {
public:
    Tensor& create(const std::string& name, std::vector<std::size_t> shape);
    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;
    bool has(const std::string& name) const { return items_.count(name) != 0; }
    void set(const std::string& name, Tensor t);

    std::vector<std::string> names() const;
    std::size_t size() const { return items_.size(); }
    std::size_t total_elements() const;

    // hash over full 64-bit payloads; used for freeze checks
    std::uint64_t content_hash() const;

    auto begin() { return items_.begin(); }
    auto end() { return items_.end(); }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }

private:
    std::map<std::string, Tensor> items_;
};

}  // namespace rndlm
