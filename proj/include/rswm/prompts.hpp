#pragma once

// Prompt templates shipped as text assets (assets/prompts/*.txt) and
// compiled into the binary.

#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace rswm::prompts {

/// Template text by asset name (file name without ".txt"). Throws InvalidInput for unknown names.
std::string_view get(std::string_view name);
std::vector<std::string_view> names();

/// SHA-256 over all templates in name order; recorded in manifests.
std::string version_hash();

/// Replaces each literal "{key}" with its value. Every key must occur in the template.
std::string render(std::string_view tmpl, const std::vector<std::pair<std::string, std::string>>& fields);

} // namespace rswm::prompts
