#pragma once

#include <string>
#include <vector>

namespace subjtok::testing::oracle {

// Expected prompt lists, typed independently of the library tables.

inline const std::vector<std::string> kTemplateOracle = {
    "a photo of a S*",        "a rendering of a S*",        "a cropped photo of the S*",
    "the photo of a S*",      "a photo of a clean S*",      "a photo of a dirty S*",
    "a dark photo of the S*", "a photo of my S*",           "a photo of the cool S*",
    "a close-up photo of a S*", "a bright photo of the S*", "a cropped photo of a S*",
    "a photo of the S*",      "a good photo of the S*",     "a photo of one S*",
    "a close-up photo of the S*", "a rendition of the S*",  "a photo of the clean S*",
    "a rendition of a S*",    "a photo of a nice S*",       "a good photo of a S*",
    "a photo of the nice S*", "a photo of the small S*",    "a photo of the weird S*",
    "a photo of the large S*", "a photo of a cool S*",      "a photo of a small S*"};

inline const std::vector<std::string> kSharedScenes = {
    "a S* in the jungle",
    "a S* in the snow",
    "a S* on the beach",
    "a S* on a cobblestone street",
    "a S* on top of pink fabric",
    "a S* on top of a wooden floor",
    "a S* with a city in the background",
    "a S* with a mountain in the background",
    "a S* with a blue house in the background",
    "a S* on top of a purple rug in a forest"};

inline const std::vector<std::string> kLiveTail = {
    "a S* with a wheat field in the background",
    "a S* with a tree and autumn leaves in the background",
    "a S* with the Eiffel Tower in the background",
    "a S* floating on top of water",
    "a S* floating in an ocean of milk",
    "a S* on top of green grass with sunflowers around it",
    "a S* on top of a mirror",
    "a S* on top of the sidewalk in a crowded street",
    "a S* on top of a dirt road",
    "a S* on top of a white rug"};

inline const std::vector<std::string> kNonliveTail = {
    "a S* wearing a red hat",
    "a S* wearing a Santa hat",
    "a S* wearing a rainbow scarf",
    "a S* wearing a black top hat and a monocle",
    "a S* in a chef outfit",
    "a S* in a firefighter outfit",
    "a S* in a police outfit",
    "a S* wearing pink glasses",
    "a S* wearing a yellow shirt",
    "a S* in a purple wizard outfit"};

inline const std::vector<std::string> kAttributes = {"a red S*", "a purple S*", "a shiny S*", "a wet S*",
                                                     "a cube shaped S*"};

inline std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b,
                                       const std::vector<std::string>& c) {
  a.insert(a.end(), b.begin(), b.end());
  a.insert(a.end(), c.begin(), c.end());
  return a;
}

}  // namespace subjtok::testing::oracle
