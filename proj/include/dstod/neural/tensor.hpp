#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

#include "dstod/error.hpp"

namespace dstod::nn {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

/// A named tensor with its gradient. Vectors are stored as 1 x n matrices and
/// linear weights as (in x out), so a layer computes x * W + b.
template <typename T>
struct Parameter {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;
  bool frozen = false;

  std::size_t size() const { return static_cast<std::size_t>(value.size()); }
};

/// Ordered parameter collection addressed by stable names. Modules keep
/// indices into the store, so copies stay self-consistent.
template <typename T>
class ParameterStore {
 public:
  std::size_t add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    if (index_.count(name)) throw Error("duplicate parameter name '" + name + "'");
    Parameter<T> p;
    p.name = name;
    p.value = Matrix<T>::Zero(rows, cols);
    p.grad = Matrix<T>::Zero(rows, cols);
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return params_.size() - 1;
  }

  Parameter<T>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }

  Parameter<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  const Parameter<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  Parameter<T>& at(const std::string& name) {
    auto* p = find(name);
    if (p == nullptr) throw Error("unknown parameter '" + name + "'");
    return *p;
  }
  const Parameter<T>& at(const std::string& name) const {
    const auto* p = find(name);
    if (p == nullptr) throw Error("unknown parameter '" + name + "'");
    return *p;
  }
  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad() {
    for (auto& p : params_) p.grad.setZero();
  }

  std::size_t count(bool trainable_only = false) const {
    std::size_t n = 0;
    for (const auto& p : params_) {
      if (!trainable_only || !p.frozen) n += p.size();
    }
    return n;
  }

  template <typename U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    for (const auto& p : params_) {
      auto i = out.add(p.name, p.value.rows(), p.value.cols());
      out[i].value = p.value.template cast<U>();
      out[i].frozen = p.frozen;
    }
    return out;
  }

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Adds `bias` (1 x n) to every row.
template <typename T>
void add_row_bias(Matrix<T>& x, const Matrix<T>& bias) {
  x.rowwise() += bias.row(0);
}

/// grad += x^T * dy unless frozen.
template <typename T>
void accumulate_weight_grad(Parameter<T>& w, const Matrix<T>& x, const Matrix<T>& dy) {
  if (!w.frozen) w.grad.noalias() += x.transpose() * dy;
}

template <typename T>
void accumulate_bias_grad(Parameter<T>& b, const Matrix<T>& dy) {
  if (!b.frozen) b.grad.row(0) += dy.colwise().sum();
}

}  // namespace dstod::nn
