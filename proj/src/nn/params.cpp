#include <algorithm>

#include "maxl/errors.hpp"
#include "maxl/nn.hpp"

namespace maxl::nn {

void ParamSet::add(std::string name, Tensor value, bool decay) {
  const bool taken = std::any_of(entries_.begin(), entries_.end(),
                                 [&](const Entry& e) { return e.name == name; });
  if (taken) throw InvalidArgumentError("param set: duplicate parameter '" + name + "'");
  entries_.push_back(Entry{std::move(name), value.detach(), decay});
}

void ParamSet::set_value(std::size_t i, Tensor value) {
  Entry& e = entries_.at(i);
  if (value.shape() != e.value.shape()) {
    throw ShapeError("param set: '" + e.name + "' has shape " + ag::shape_str(e.value.shape()) +
                     ", got " + ag::shape_str(value.shape()));
  }
  e.value = value.detach();
}

std::size_t ParamSet::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name == name) return i;
  }
  throw InvalidArgumentError("param set: no parameter named '" + name + "'");
}

std::size_t ParamSet::numel() const {
  std::size_t n = 0;
  for (const Entry& e : entries_) n += e.value.numel();
  return n;
}

std::vector<Tensor> ParamSet::bind(ag::Tape& tape) const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const Entry& e : entries_) out.push_back(tape.leaf(e.value));
  return out;
}

std::vector<Tensor> ParamSet::values() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const Entry& e : entries_) out.push_back(e.value);
  return out;
}

bool ParamSet::operator==(const ParamSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const Entry& a = entries_[i];
    const Entry& b = other.entries_[i];
    if (a.name != b.name || a.decay != b.decay || a.value.shape() != b.value.shape()) return false;
    if (!std::equal(a.value.data().begin(), a.value.data().end(), b.value.data().begin())) {
      return false;
    }
  }
  return true;
}

}  // namespace maxl::nn
