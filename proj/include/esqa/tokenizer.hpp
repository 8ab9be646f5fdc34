#pragma once

#include <map>
#include <string>
#include <vector>

#include "json.hpp"

namespace esqa {

// Units are letter runs, single digits and single punctuation marks. A unit
// preceded by one space is a separate token (" bread"), so detokenize is
// plain concatenation.
class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kSeqPrefix = 3;
  static constexpr int kSeqSuffix = 4;
  static constexpr int kSpecialCount = 5;

  Tokenizer() = default;

  // Vocabulary covering every unit in `texts` (both spacing variants), all
  // digits and the basic punctuation. Throws unless "Yes" and "No" are single tokens.
  static Tokenizer build(const std::vector<std::string>& texts);

  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& ids) const;  // specials are skipped

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  int id(const std::string& token) const;
  bool contains(const std::string& token) const { return ids_.count(token) > 0; }
  bool covers(const std::string& text) const;

  int yes_id() const { return yes_; }
  int no_id() const { return no_; }

  nlohmann::json to_json() const;
  static Tokenizer from_json(const nlohmann::json& doc);

 private:
  explicit Tokenizer(std::vector<std::string> tokens);

  std::vector<std::string> tokens_;
  std::map<std::string, int> ids_;
  int yes_ = -1;
  int no_ = -1;
};

// Splits text into the token strings used above, without vocabulary lookup.
std::vector<std::string> split_units(const std::string& text);

}  // namespace esqa
