#include "rndlm/params.hpp"

#include "rndlm/errors.hpp"
#include "rndlm/rng.hpp"

namespace rndlm {

Tensor& ParameterStore::create(const std::string& name, std::vector<std::size_t> shape) {
    if (items_.count(name)) {
        throw Error("parameter already registered: " + name);
    }
    return items_.emplace(name, Tensor(std::move(shape))).first->second;
}

Tensor& ParameterStore::get(const std::string& name) {
    auto it = items_.find(name);
    if (it == items_.end()) throw Error("unknown parameter: " + name);
    return it->second;
}

const Tensor& ParameterStore::get(const std::string& name) const {
    auto it = items_.find(name);
    if (it == items_.end()) throw Error("unknown parameter: " + name);
    return it->second;
}

void ParameterStore::set(const std::string& name, Tensor t) {
    items_.insert_or_assign(name, std::move(t));
}

std::vector<std::string> ParameterStore::names() const {
    std::vector<std::string> out;
    out.reserve(items_.size());
    for (const auto& [k, v] : items_) out.push_back(k);
    return out;
}

std::size_t ParameterStore::total_elements() const {
    std::size_t n = 0;
    for (const auto& [k, v] : items_) n += v.numel();
    return n;
}

std::uint64_t ParameterStore::content_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [k, v] : items_) {
        h = fnv1a64(k.data(), k.size(), h);
        h = fnv1a64(v.data(), v.numel() * sizeof(double), h);
    }
    return h;
}

}  // namespace rndlm
