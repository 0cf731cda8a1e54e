#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ambert/common.hpp"
#include "ambert/tensor.hpp"

namespace ambert {

template <typename T>
struct Param {
  Tensor<T> value;
  Tensor<T> grad;
  std::string shared_key;  // set when more than one name aliases this storage
  bool decay = true;       // LayerNorm and bias tensors are exempt from weight decay
};

/// Named-tensor store. Several names may alias one storage (a sharing
/// group); gradients from every site then land in the single grad buffer.
/// Copies are deep and preserve the aliasing structure.
template <typename T>
class ParamStore {
 public:
  struct Group {
    std::vector<std::string> names;  // first name is the primary
    std::size_t storage = 0;
  };

  ParamStore() = default;
  ParamStore(const ParamStore& o) { *this = o; }
  ParamStore& operator=(const ParamStore& o) {
    if (this == &o) return *this;
    storages_.clear();
    for (const auto& s : o.storages_) storages_.push_back(std::make_unique<Param<T>>(*s));
    index_ = o.index_;
    names_ = o.names_;
    return *this;
  }
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  std::size_t add(const std::string& name, Shape shape, bool decay = true) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter " + name);
    auto p = std::make_unique<Param<T>>();
    p->value = Tensor<T>(shape);
    p->grad = Tensor<T>(shape);
    p->decay = decay;
    storages_.push_back(std::move(p));
    index_[name] = storages_.size() - 1;
    names_.push_back(name);
    return storages_.size() - 1;
  }

  /// Binds `name` to the storage already registered under `existing`.
  std::size_t alias(const std::string& name, const std::string& existing,
                    const std::string& shared_key) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter " + name);
    const std::size_t s = index_of(existing);
    storages_[s]->shared_key = shared_key;
    index_[name] = s;
    names_.push_back(name);
    return s;
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }
  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
    return it->second;
  }
  Param<T>& at(std::size_t storage) { return *storages_[storage]; }
  const Param<T>& at(std::size_t storage) const { return *storages_[storage]; }
  Param<T>& get(const std::string& name) { return at(index_of(name)); }
  const Param<T>& get(const std::string& name) const { return at(index_of(name)); }

  const std::vector<std::string>& names() const { return names_; }
  std::size_t storage_count() const { return storages_.size(); }

  /// One entry per storage, in creation order, listing every aliasing name.
  std::vector<Group> groups() const {
    std::vector<Group> out(storages_.size());
    for (std::size_t s = 0; s < out.size(); ++s) out[s].storage = s;
    for (const auto& n : names_) out[index_.at(n)].names.push_back(n);
    return out;
  }

  /// Learnable scalars, counting shared storage once.
  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& s : storages_) n += s->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& s : storages_) s->grad.zero();
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const Group& g : groups()) {
      const Param<T>& src = at(g.storage);
      const std::size_t s = out.add(g.names.front(), src.value.shape(), src.decay);
      out.at(s).value = src.value.template cast<U>();
      for (std::size_t i = 1; i < g.names.size(); ++i)
        out.alias(g.names[i], g.names.front(), src.shared_key);
    }
    return out;
  }

 private:
  std::vector<std::unique_ptr<Param<T>>> storages_;
  std::map<std::string, std::size_t> index_;
  std::vector<std::string> names_;
};

}  // namespace ambert
