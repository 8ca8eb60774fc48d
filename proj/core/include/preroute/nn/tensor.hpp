#pragma once

#include <cstdint>
#include <map>
#include <string>

#include <Eigen/Core>

namespace preroute::nn {

/// Row-major dense matrix; every tensor in the model is 2-D.
template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
struct Parameter {
  Mat<T> value;
  Mat<T> grad;
  /// Frozen parameters still take part in the forward pass but never
  /// receive gradients.
  bool trainable = true;
};

/// Named parameters, iterated in lexicographic path order. Addresses are
/// stable for the lifetime of the store.
template <class T>
class ParamStore {
 public:
  Parameter<T>& add(const std::string& path, Eigen::Index rows, Eigen::Index cols);
  Parameter<T>& at(const std::string& path);
  const Parameter<T>& at(const std::string& path) const;
  bool contains(const std::string& path) const { return params_.count(path) != 0; }

  std::map<std::string, Parameter<T>>& items() { return params_; }
  const std::map<std::string, Parameter<T>>& items() const { return params_; }

  void zero_grad();
  /// Marks every parameter whose path starts with `prefix`.
  void set_trainable(const std::string& prefix, bool trainable);
  std::size_t num_scalars() const;

 private:
  std::map<std::string, Parameter<T>> params_;
};

extern template class ParamStore<float>;
extern template class ParamStore<double>;

}  // namespace preroute::nn
