#include "forge/types.hpp"

#include <map>
#include <unordered_map>

namespace forge {

Categorical Categorical::from_strings(const std::vector<std::string>& values) {
  Categorical c;
  std::unordered_map<std::string, int> index;
  c.codes.reserve(values.size());
  for (const auto& v : values) {
    auto [it, inserted] = index.emplace(v, static_cast<int>(c.levels.size()));
    if (inserted) c.levels.push_back(v);
    c.codes.push_back(it->second);
  }
  return c;
}

int Categorical::code_of(const std::string& level) const {
  for (std::size_t i = 0; i < levels.size(); ++i)
    if (levels[i] == level) return static_cast<int>(i);
  return -1;
}

Categorical Categorical::subset(const IndexList& rows) const {
  Categorical c;
  c.levels = levels;
  c.codes.reserve(rows.size());
  for (int r : rows) c.codes.push_back(codes[static_cast<std::size_t>(r)]);
  return c;
}

Categorical Categorical::compacted() const {
  std::vector<std::string> values;
  values.reserve(codes.size());
  for (std::size_t i = 0; i < codes.size(); ++i) values.push_back(label(i));
  return from_strings(values);
}

}  // namespace forge
