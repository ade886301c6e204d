#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "xar/matrix.hpp"

namespace xar {

enum class EntityKind { Token, Cell, Subsample, Scale, Image };

std::string_view to_string(EntityKind kind);
EntityKind parse_entity_kind(std::string_view name);

struct GridShape {
    std::size_t h = 0;
    std::size_t w = 0;
    std::size_t c = 0;

    std::size_t positions() const { return h * w; }
    std::size_t numel() const { return h * w * c; }
    bool operator==(const GridShape&) const = default;
};

// Real-valued h x w x c latent, stored row-major as (row, col, channel).
class LatentGrid {
public:
    LatentGrid() = default;
    explicit LatentGrid(GridShape shape, double fill = 0.0);
    LatentGrid(GridShape shape, std::vector<double> values);

    const GridShape& shape() const { return shape_; }
    double& at(std::size_t i, std::size_t j, std::size_t ch) { return values_[(i * shape_.w + j) * shape_.c + ch]; }
    double at(std::size_t i, std::size_t j, std::size_t ch) const {
        return values_[(i * shape_.w + j) * shape_.c + ch];
    }
    std::vector<double>& values() { return values_; }
    const std::vector<double>& values() const { return values_; }

    bool operator==(const LatentGrid&) const = default;

private:
    GridShape shape_;
    std::vector<double> values_;
};

struct TokenSpan {
    std::size_t offset = 0;
    std::size_t count = 0;
    bool operator==(const TokenSpan&) const = default;
};

// Grid-independent description of an entity decomposition, as written in run configs.
struct LayoutSpec {
    EntityKind kind = EntityKind::Cell;
    std::size_t cell_size = 0;
    std::size_t distance = 0;
    // Explicit ascending scales; empty means the halving schedule with `scale_levels` levels.
    std::vector<std::size_t> scales;
    std::size_t scale_levels = 0;

    std::string to_config() const;
};

class EntityLayout {
public:
    EntityKind kind() const { return kind_; }
    const GridShape& grid() const { return grid_; }
    std::size_t cell_size() const { return cell_size_; }
    std::size_t distance() const { return distance_; }
    const std::vector<std::size_t>& scales() const { return scales_; }
    const std::vector<TokenSpan>& spans() const { return spans_; }

    std::size_t entity_count() const { return spans_.size(); }
    std::size_t total_tokens() const;
    // Index of the entity owning sequence token t.
    std::size_t entity_of_token(std::size_t t) const;
    // Spatial centre of every sequence token in full-resolution grid coordinates (row, col).
    std::vector<std::pair<double, double>> token_coordinates() const;
    // For non-Scale kinds: grid position (i * w + j) of every sequence token.
    const std::vector<std::size_t>& source_positions() const { return source_; }

    LayoutSpec spec() const;
    bool operator==(const EntityLayout&) const = default;

    friend EntityLayout build_layout(EntityKind, GridShape,
                                     const std::variant<std::monostate, std::size_t, std::vector<std::size_t>>&);

private:
    EntityKind kind_ = EntityKind::Image;
    GridShape grid_;
    std::size_t cell_size_ = 0;
    std::size_t distance_ = 0;
    std::vector<std::size_t> scales_;
    std::vector<TokenSpan> spans_;
    std::vector<std::size_t> source_;
};

using LayoutParam = std::variant<std::monostate, std::size_t, std::vector<std::size_t>>;

// Cell takes k, Subsample takes d, Scale takes either an explicit scale list or
// a level count for the default schedule. Token and Image take no parameter.
EntityLayout build_layout(EntityKind kind, GridShape grid, const LayoutParam& param = {});
EntityLayout build_layout(const LayoutSpec& spec, GridShape grid);

std::vector<std::size_t> default_scale_schedule(std::size_t base, std::size_t levels);

struct EntitySequence {
    Matrix tokens;  // [total_tokens, c]
    EntityLayout layout;

    Matrix entity(std::size_t n) const;
};

EntitySequence latent_to_entities(const LatentGrid& latent, const EntityLayout& layout);
LatentGrid entities_to_latent(const EntitySequence& seq);
const std::vector<TokenSpan>& entity_token_spans(const EntityLayout& layout);

// Area-average resize to s x s (adaptive average pooling bins).
LatentGrid resize_area(const LatentGrid& latent, std::size_t s);

}  // namespace xar
