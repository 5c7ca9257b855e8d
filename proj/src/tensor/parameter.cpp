#include "distill_span/parameter.hpp"

#include <set>

namespace distill_span {

template <typename T>
void require_unique_names(const ConstParameterList<T>& params) {
  std::set<std::string> seen;
  for (const Parameter<T>* p : params) {
    if (!seen.insert(p->name).second) {
      throw ConfigError("duplicate parameter name '" + p->name + "'");
    }
  }
}

template void require_unique_names<float>(const ConstParameterList<float>&);
template void require_unique_names<double>(const ConstParameterList<double>&);

}  // namespace distill_span
