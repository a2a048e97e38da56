#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "core/errors.hpp"
#include "core/tape.hpp"
#include "core/tensor.hpp"

namespace punet {

// Named parameter collection with per-parameter freeze flags. Names are
// hierarchical ("backbone/stem/w", "itb/0/msa/h1/wq", "prompt/r3", ...); the
// segment before the first '/' is the freeze group. std::map keeps iteration
// deterministic.
template <typename S>
class ParamStore {
 public:
  struct Entry {
    Tensor<S> value;
    bool frozen = false;
  };

  void add(const std::string& name, Tensor<S> value, bool frozen = false) {
    auto [it, inserted] = entries_.emplace(name, Entry{std::move(value), frozen});
    if (!inserted) throw ContractError("duplicate parameter name: " + name);
  }

  bool has(const std::string& name) const { return entries_.count(name) != 0; }

  Entry& entry(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
  }
  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
  }

  Tensor<S>& value(const std::string& name) { return entry(name).value; }
  const Tensor<S>& value(const std::string& name) const { return entry(name).value; }
  bool frozen(const std::string& name) const { return entry(name).frozen; }
  void set_frozen(const std::string& name, bool f) { entry(name).frozen = f; }

  void freeze_all() {
    for (auto& [k, e] : entries_) e.frozen = true;
  }
  void unfreeze_all() {
    for (auto& [k, e] : entries_) e.frozen = false;
  }

  std::map<std::string, Entry>& entries() { return entries_; }
  const std::map<std::string, Entry>& entries() const { return entries_; }

  static std::string group_of(const std::string& name) {
    auto pos = name.find('/');
    return pos == std::string::npos ? name : name.substr(0, pos);
  }

  std::size_t total_params() const {
    std::size_t n = 0;
    for (const auto& [k, e] : entries_) n += e.value.numel();
    return n;
  }

  std::size_t trainable_params() const {
    std::size_t n = 0;
    for (const auto& [k, e] : entries_) {
      if (!e.frozen) n += e.value.numel();
    }
    return n;
  }

  // Exact element count over the named freeze groups. An empty filter counts
  // nothing.
  std::size_t count_params(const std::set<std::string>& groups) const {
    std::size_t n = 0;
    for (const auto& [k, e] : entries_) {
      if (groups.count(group_of(k))) n += e.value.numel();
    }
    return n;
  }

  std::set<std::string> groups() const {
    std::set<std::string> g;
    for (const auto& [k, e] : entries_) g.insert(group_of(k));
    return g;
  }

  template <typename T>
  ParamStore<T> cast() const {
    ParamStore<T> out;
    for (const auto& [k, e] : entries_) out.add(k, e.value.template cast<T>(), e.frozen);
    return out;
  }

 private:
  std::map<std::string, Entry> entries_;
};

// Per-forward binding of a store's parameters as tape leaves. Frozen
// parameters enter with requires_grad=false, so they accumulate no gradient.
template <typename S>
struct BoundParams {
  std::map<std::string, Var<S>> vars;

  Var<S> operator[](const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) throw ContractError("parameter not bound: " + name);
    return it->second;
  }
};

template <typename S>
BoundParams<S> bind_params(Tape<S>& tape, const ParamStore<S>& store) {
  BoundParams<S> b;
  for (const auto& [name, e] : store.entries()) {
    b.vars.emplace(name, tape.leaf(e.value, !e.frozen));
  }
  return b;
}

// Inference binding: nothing requires gradients, so the tape records no
// backward closures and retains no activations beyond the values themselves.
template <typename S>
BoundParams<S> bind_params_const(Tape<S>& tape, const ParamStore<S>& store) {
  BoundParams<S> b;
  for (const auto& [name, e] : store.entries()) {
    b.vars.emplace(name, tape.leaf(e.value, false));
  }
  return b;
}

// Gradient map after backward: every non-frozen parameter gets an entry
// (zeros when the loss did not touch it); frozen parameters are absent.
template <typename S>
std::map<std::string, Tensor<S>> collect_grads(Tape<S>& tape, const BoundParams<S>& bound,
                                               const ParamStore<S>& store) {
  std::map<std::string, Tensor<S>> grads;
  for (const auto& [name, e] : store.entries()) {
    if (e.frozen) continue;
    const Var<S>& v = bound.vars.at(name);
    if (tape.grad_live(v.id)) {
      grads.emplace(name, tape.grad(v.id));
    } else {
      grads.emplace(name, Tensor<S>::zeros(e.value.shape));
    }
  }
  return grads;
}

}  // namespace punet
