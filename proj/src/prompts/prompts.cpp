#include "rswm/prompts.hpp"

#include "rswm/common/errors.hpp"
#include "rswm/common/hash.hpp"

namespace rswm::prompts {

namespace detail {
extern const std::pair<std::string_view, std::string_view> kTemplates[];
extern const int kTemplateCount;
} // namespace detail

std::string_view get(std::string_view name) {
    for (int i = 0; i < detail::kTemplateCount; ++i)
        if (detail::kTemplates[i].first == name) return detail::kTemplates[i].second;
    throw InvalidInput("unknown prompt template: " + std::string(name));
}

std::vector<std::string_view> names() {
    std::vector<std::string_view> out;
    for (int i = 0; i < detail::kTemplateCount; ++i) out.push_back(detail::kTemplates[i].first);
    return out;
}

std::string version_hash() {
    Sha256 h;
    for (int i = 0; i < detail::kTemplateCount; ++i) {
        h.update(detail::kTemplates[i].first);
        h.update(std::string_view("\0", 1));
        h.update(detail::kTemplates[i].second);
        h.update(std::string_view("\0", 1));
    }
    return h.hex_digest();
}

std::string render(std::string_view tmpl, const std::vector<std::pair<std::string, std::string>>& fields) {
    std::string out(tmpl);
    for (const auto& [key, value] : fields) {
        const std::string token = "{" + key + "}";
        std::size_t pos = out.find(token);
        require(pos != std::string::npos, "prompt template has no placeholder " + token);
        while (pos != std::string::npos) {
            out.replace(pos, token.size(), value);
            pos = out.find(token, pos + value.size());
        }
    }
    return out;
}

} // namespace rswm::prompts
