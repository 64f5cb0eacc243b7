"""Deterministic SVG rendering of a (possibly partial) layout."""

from __future__ import annotations

from xml.sax.saxutils import escape

from .env import Layout
from .netlist import Netlist

CELL = 24
MARGIN = 12
PALETTE = ("#8dd3c7", "#ffffb3", "#bebada", "#fb8072", "#80b1d3",
           "#fdb462", "#b3de69", "#fccde5", "#d9d9d9", "#bc80bd")


def _f(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def render_svg(layout: Layout, netlist: Netlist | None = None, cell: int = CELL) -> str:
    """SVG text: canvas, grid lines, one rect per placed macro, pins as dots.

    The canvas is the only ``<rect>`` that is not a macro. The grid's y axis
    points up, so row 0 is drawn at the bottom.
    """
    N = layout.grid_n
    side = N * cell
    size = side + 2 * MARGIN

    def X(x):
        return MARGIN + x * cell

    def Y(y):
        return MARGIN + side - y * cell

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">',
           f'<title>{escape(layout.netlist)}</title>',
           f'<rect class="canvas" x="{MARGIN}" y="{MARGIN}" width="{side}" height="{side}" '
           f'fill="white" stroke="black" stroke-width="1.5"/>',
           '<g class="grid" stroke="#cccccc" stroke-width="0.5">']
    for i in range(1, N):
        out.append(f'<line x1="{X(i)}" y1="{MARGIN}" x2="{X(i)}" y2="{MARGIN + side}"/>')
        out.append(f'<line x1="{MARGIN}" y1="{Y(i)}" x2="{MARGIN + side}" y2="{Y(i)}"/>')
    out.append('</g>')

    macros = {m.id: m for m in netlist.macros} if netlist is not None else {}
    for mid, x, y in layout.placements:
        m = macros.get(mid)
        w, h = (m.width_cells, m.height_cells) if m is not None else (1, 1)
        color = PALETTE[mid % len(PALETTE)]
        out.append(f'<g class="macro" id="m{mid}">')
        out.append(f'<rect x="{X(x)}" y="{Y(y + h)}" width="{w * cell}" height="{h * cell}" '
                   f'fill="{color}" stroke="black" stroke-width="1"/>')
        out.append(f'<text x="{_f(X(x + w / 2))}" y="{_f(Y(y + h / 2))}" font-size="{cell // 2}" '
                   f'text-anchor="middle" dominant-baseline="central">{mid}</text>')
        if m is not None:
            for p in m.pins:
                out.append(f'<circle class="pin" cx="{_f(X(x + p.dx))}" cy="{_f(Y(y + p.dy))}" '
                           f'r="2"/>')
        out.append('</g>')
    out.append('</svg>')
    return "\n".join(out) + "\n"
