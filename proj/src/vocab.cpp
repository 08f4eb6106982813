#include "subjtok/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include "subjtok/common.hpp"
#include "subjtok/data.hpp"

namespace subjtok {

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
  for (size_t i = 0; i < words_.size(); ++i) index_.emplace(words_[i], static_cast<int64_t>(i));
}

std::vector<std::string> Vocabulary::split(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if ((c == 'S' || c == 's') && i + 1 < text.size() && text[i + 1] == '*') {
      flush();
      out.emplace_back(data::kPlaceholder);
      ++i;
    } else if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else if (std::isalnum(static_cast<unsigned char>(c)) || c == '-') {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else {
      flush();
    }
  }
  flush();
  return out;
}

Vocabulary Vocabulary::toy() {
  std::set<std::string> words;
  auto add_text = [&](std::string_view text) {
    for (auto& w : split(text)) {
      if (w != data::kPlaceholder) words.insert(std::move(w));
    }
  };
  for (auto t : data::training_templates()) add_text(t);
  for (auto t : data::editing_prompts(data::SubjectCategory::live)) add_text(t);
  for (auto t : data::editing_prompts(data::SubjectCategory::nonlive)) add_text(t);
  for (auto w : data::ToyLexicon::shapes()) add_text(w);
  for (auto w : data::ToyLexicon::colors()) add_text(w);
  for (auto w : data::ToyLexicon::patterns()) add_text(w);
  for (size_t s = 0; s < data::ToyLexicon::scenes().size(); ++s) add_text(data::ToyLexicon::scene_phrase(s));
  std::vector<std::string> all = {"<pad>", "<unk>", "<bos>", "<eos>", std::string(data::kPlaceholder)};
  all.insert(all.end(), words.begin(), words.end());
  return Vocabulary(std::move(all));
}

bool Vocabulary::contains(std::string_view word) const { return index_.contains(std::string(word)); }

int64_t Vocabulary::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end()) throw VocabularyError("word '" + std::string(word) + "' is not in the vocabulary");
  return it->second;
}

std::vector<int64_t> Vocabulary::encode(std::string_view text) const {
  std::vector<int64_t> ids = {kBos};
  for (const auto& w : split(text)) {
    auto it = index_.find(w);
    ids.push_back(it == index_.end() ? kUnk : it->second);
  }
  ids.push_back(kEos);
  return ids;
}

std::vector<int64_t> Vocabulary::encode_strict(std::string_view text) const {
  std::vector<int64_t> ids = {kBos};
  for (const auto& w : split(text)) ids.push_back(id(w));
  ids.push_back(kEos);
  return ids;
}

}  // namespace subjtok
