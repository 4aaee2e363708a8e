"""Layer shapes shared by the BitOps model and the overhead model."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class LayerShape:
    name: str
    d_in: int
    d_out: int
    tokens: int  # rows per sample fed through the layer in one forward pass


@dataclass(frozen=True)
class ModelGeometry:
    layers: tuple[LayerShape, ...]
    param_count: int  # all full-precision parameters, not only the linear layers

    @property
    def names(self) -> list[str]:
        return [layer.name for layer in self.layers]


def dit_xl2_geometry() -> ModelGeometry:
    """DiT-XL/2 at 256x256 (hidden 1152, 28 blocks, 256 tokens, class-conditional).

    The parameter count includes the 1001-entry label table and the
    learned-sigma output head, giving 674,834,720 parameters.
    """
    hidden, blocks, tokens, freq = 1152, 28, 256, 256
    layers = [
        LayerShape("t_embed.fc1", freq, hidden, 1),
        LayerShape("t_embed.fc2", hidden, hidden, 1),
        LayerShape("patch_embed", 2 * 2 * 4, hidden, tokens),
    ]
    for i in range(blocks):
        layers += [
            LayerShape(f"blocks.{i}.adaLN", hidden, 6 * hidden, 1),
            LayerShape(f"blocks.{i}.qkv", hidden, 3 * hidden, tokens),
            LayerShape(f"blocks.{i}.proj", hidden, hidden, tokens),
            LayerShape(f"blocks.{i}.fc1", hidden, 4 * hidden, tokens),
            LayerShape(f"blocks.{i}.fc2", 4 * hidden, hidden, tokens),
        ]
    layers += [
        LayerShape("final.adaLN", hidden, 2 * hidden, 1),
        LayerShape("final.linear", hidden, 2 * 2 * 8, tokens),
    ]
    linear_params = sum(layer.d_in * layer.d_out + layer.d_out for layer in layers)
    label_table = 1001 * hidden
    return ModelGeometry(tuple(layers), linear_params + label_table)
