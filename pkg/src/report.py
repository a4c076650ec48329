"""Image montages and the Bootstrap HTML run report."""

import html
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .analysis import CellAssignment
from .cell_types import CellInstance, batch_to_images
from .nn import Generator, fixed_code_noise, network_dtype


def tile(images: np.ndarray, columns: int, pad: int = 2, fill: int = 255) -> np.ndarray:
    """
    Arrange (N, H, W, 3) uint8 images row-major into a grid.

    Raises:
        ValueError: If there are no images or columns < 1
    """
    images = np.asarray(images, dtype=np.uint8)
    if len(images) == 0:
        raise ValueError("montage needs at least one image")
    if columns < 1:
        raise ValueError(f"columns must be >= 1, got {columns}")
    n, h, w, c = images.shape
    rows = math.ceil(n / columns)
    canvas = np.full((rows * (h + pad) + pad, columns * (w + pad) + pad, c), fill, dtype=np.uint8)
    for i, img in enumerate(images):
        r, col = divmod(i, columns)
        top, left = pad + r * (h + pad), pad + col * (w + pad)
        canvas[top:top + h, left:left + w] = img
    return canvas


def _render(G: Generator, codes: Sequence[int], gaussian: np.ndarray, K: int) -> np.ndarray:
    noise = fixed_code_noise(codes, gaussian, K)
    was_training = G.training
    G.eval()
    try:
        with ad.no_record():
            out = G(noise.as_tensor(network_dtype(G)))
    finally:
        G.train(was_training)
    return batch_to_images(out.values)


def generator_montage(G: Generator, K: int, dim_z: int, rows: int = 8, seed: int = 0) -> np.ndarray:
    """Grid with one column per categorical value and one row per fixed z draw."""
    z = np.random.default_rng([seed, 4]).standard_normal((rows, dim_z))
    codes = np.tile(np.arange(K), rows)
    return tile(_render(G, codes, np.repeat(z, K, axis=0), K), columns=K)


def z_walk_montage(G: Generator, K: int, dim_z: int, steps: int = 8, step_size: float = 0.5,
                   seed: int = 0) -> np.ndarray:
    """
    Random walk in z with c held fixed: row k walks with code k.

    Every row follows the same walk, so changes along a row come from z alone.
    """
    rng = np.random.default_rng([seed, 5])
    walk = np.cumsum(np.vstack([rng.standard_normal((1, dim_z)),
                                step_size * rng.standard_normal((steps - 1, dim_z))]), axis=0)
    codes = np.repeat(np.arange(K), steps)
    return tile(_render(G, codes, np.tile(walk, (K, 1)), K), columns=steps)


def cluster_montages(instances: Sequence[CellInstance], assignments: Sequence[CellAssignment], K: int,
                     per_cluster: int = 60, seed: int = 0, columns: int = 10) -> Dict[int, np.ndarray]:
    """Up to ``per_cluster`` randomly chosen instances for every non-empty cluster."""
    rng = np.random.default_rng([seed, 6])
    montages = {}
    for k in range(K):
        members = [i for i, a in enumerate(assignments) if a.cluster == k]
        if not members:
            continue
        chosen = sorted(rng.choice(members, size=min(per_cluster, len(members)), replace=False))
        montages[k] = tile(np.stack([instances[i].image for i in chosen]), columns=min(columns, len(chosen)))
    return montages


@dataclass
class ReportSection:
    """One card of the run report."""
    title: str
    metrics: Dict[str, float] = field(default_factory=dict)
    images: List[Tuple[str, str]] = field(default_factory=list)
    table: Optional[Tuple[List[str], List[List]]] = None


def _html_header(title: str) -> str:
    """Generate HTML header with Bootstrap and custom styles."""
    return f'''<!DOCTYPE html>
<html lang="en">
<head>
    <meta charset="UTF-8">
    <meta name="viewport" content="width=device-width, initial-scale=1.0">
    <title>{html.escape(title)}</title>
    <link href="https://cdn.jsdelivr.net/npm/bootstrap@5.3.2/dist/css/bootstrap.min.css" rel="stylesheet">
    <style>
        :root {{
            --color-primary: #2563eb;
            --surface-card: #ffffff;
            --surface-alt: #f9fafb;
            --border-color: #e5e7eb;
            --shadow-sm: 0 1px 2px rgba(0, 0, 0, 0.05);
        }}

        body {{
            font-family: -apple-system, BlinkMacSystemFont, 'Segoe UI', Roboto, 'Helvetica Neue', Arial, sans-serif;
            background-color: var(--surface-alt);
            color: #1f2937;
        }}

        .page-title {{
            font-size: 1.75rem;
            font-weight: 700;
            color: #111827;
        }}

        .report-card {{
            background: var(--surface-card);
            border: 1px solid var(--border-color);
            border-radius: 0.5rem;
            box-shadow: var(--shadow-sm);
            padding: 1rem 1.25rem;
            margin-bottom: 1.5rem;
        }}

        .metric-value {{
            font-variant-numeric: tabular-nums;
            font-weight: 600;
            color: var(--color-primary);
        }}

        .montage {{
            image-rendering: pixelated;
            max-width: 100%;
        }}
    </style>
</head>
<body>
    <div class="container py-4">
'''


def _html_footer() -> str:
    """Generate HTML footer."""
    return '''
    </div>
</body>
</html>
'''


def _format_metric(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return html.escape(str(value))


def _section_html(section: ReportSection) -> str:
    out = f'''
        <div class="report-card">
            <h2 class="h5">{html.escape(section.title)}</h2>
    '''
    if section.metrics:
        out += '<table class="table table-sm w-auto"><tbody>'
        for key, value in section.metrics.items():
            out += (f'<tr><th scope="row">{html.escape(key)}</th>'
                    f'<td class="metric-value">{_format_metric(value)}</td></tr>')
        out += '</tbody></table>'
    if section.table:
        header, rows = section.table
        out += '<table class="table table-sm table-striped"><thead><tr>'
        out += ''.join(f'<th>{html.escape(str(h))}</th>' for h in header)
        out += '</tr></thead><tbody>'
        for row in rows:
            out += '<tr>' + ''.join(f'<td>{_format_metric(v)}</td>' for v in row) + '</tr>'
        out += '</tbody></table>'
    for caption, src in section.images:
        out += f'''
            <figure class="figure me-3">
                <img class="montage figure-img" src="{html.escape(src)}" alt="{html.escape(caption)}">
                <figcaption class="figure-caption">{html.escape(caption)}</figcaption>
            </figure>
        '''
    out += '</div>'
    return out


def generate_report_html(title: str, sections: Sequence[ReportSection],
                         output_path: Optional[Path] = None) -> str:
    """Render report sections as a standalone page; image paths are relative to the page."""
    page = _html_header(title)
    page += f'''
        <div class="mb-4">
            <h1 class="page-title">{html.escape(title)}</h1>
        </div>
    '''
    for section in sections:
        page += _section_html(section)
    page += _html_footer()

    if output_path:
        Path(output_path).parent.mkdir(parents=True, exist_ok=True)
        Path(output_path).write_text(page)

    return page
