#include "esqa/tokenizer.hpp"

#include <cctype>
#include <set>

#include "esqa/error.hpp"

namespace esqa {

namespace {

const char* const kSpecials[] = {"<pad>", "<bos>", "<eos>", "<seq>", "</seq>"};

bool is_letter(char c) { return std::isalpha(static_cast<unsigned char>(c)) != 0; }

}  // namespace

std::vector<std::string> split_units(const std::string& text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    std::string lead;
    if (text[i] == ' ') {
      // A lone space attaches to the next unit; a run leaves bare spaces.
      if (i + 1 < text.size() && text[i + 1] != ' ') {
        lead = " ";
        ++i;
      } else {
        out.emplace_back(" ");
        ++i;
        continue;
      }
    }
    std::size_t j = i + 1;
    if (is_letter(text[i])) {
      while (j < text.size() && is_letter(text[j])) ++j;
    }
    out.push_back(lead + text.substr(i, j - i));
    i = j;
  }
  return out;
}

Tokenizer::Tokenizer(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!ids_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw DataError("tokenizer: duplicate token '" + tokens_[i] + "'");
    }
  }
  for (int i = 0; i < kSpecialCount; ++i) {
    if (tokens_.size() <= static_cast<std::size_t>(i) || tokens_[i] != kSpecials[i]) {
      throw DataError("tokenizer: reserved index " + std::to_string(i) + " must be " + kSpecials[i]);
    }
  }
  const auto yes = encode("Yes");
  const auto no = encode("No");
  if (yes.size() != 1 || no.size() != 1) throw ConfigError("tokenizer: Yes and No must be single tokens");
  yes_ = yes[0];
  no_ = no[0];
}

Tokenizer Tokenizer::build(const std::vector<std::string>& texts) {
  std::set<std::string> units;
  auto add = [&](const std::string& u) {
    const std::string bare = u[0] == ' ' && u.size() > 1 ? u.substr(1) : u;
    units.insert(bare);
    if (bare != " ") units.insert(" " + bare);
  };
  for (const auto& t : texts)
    for (const auto& u : split_units(t)) add(u);
  for (char c = '0'; c <= '9'; ++c) add(std::string(1, c));
  for (const char* p : {".", "-", ",", ":", ";", "?", " ", "Yes", "No"}) add(p);

  std::vector<std::string> tokens(std::begin(kSpecials), std::end(kSpecials));
  tokens.insert(tokens.end(), units.begin(), units.end());
  return Tokenizer(std::move(tokens));
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
  std::vector<int> out;
  for (const auto& u : split_units(text)) {
    if (auto it = ids_.find(u); it != ids_.end()) {
      out.push_back(it->second);
      continue;
    }
    if (u.size() > 1 && u[0] == ' ') {
      auto sp = ids_.find(" ");
      auto rest = ids_.find(u.substr(1));
      if (sp != ids_.end() && rest != ids_.end()) {
        out.push_back(sp->second);
        out.push_back(rest->second);
        continue;
      }
    }
    throw DataError("tokenizer: unknown word '" + u + "' in \"" + text + "\"");
  }
  return out;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id < kSpecialCount) continue;
    out += tokens_.at(static_cast<std::size_t>(id));
  }
  return out;
}

int Tokenizer::id(const std::string& token) const {
  auto it = ids_.find(token);
  if (it == ids_.end()) throw DataError("tokenizer: unknown token '" + token + "'");
  return it->second;
}

bool Tokenizer::covers(const std::string& text) const {
  try {
    encode(text);
    return true;
  } catch (const DataError&) {
    return false;
  }
}

nlohmann::json Tokenizer::to_json() const { return tokens_; }

Tokenizer Tokenizer::from_json(const nlohmann::json& doc) {
  try {
    return Tokenizer(doc.get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("tokenizer vocabulary: ") + e.what());
  }
}

}  // namespace esqa
