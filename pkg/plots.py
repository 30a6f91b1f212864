import logging
from pathlib import Path
from typing import List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from errors import ReportError  # noqa: E402

logger = logging.getLogger(__name__)


def plot_matrix(
    labels: Sequence[int],
    values: List[List[float]],
    path: Union[str, Path],
    title: Optional[str] = None,
) -> Path:
    """Annotated heatmap of a domain x domain matrix. Signed matrices get a diverging colormap."""
    data = np.asarray(values, dtype=np.float64)
    signed = bool(np.any(data < 0))
    limit = float(np.abs(data).max()) or 1.0

    fig, ax = plt.subplots(figsize=(1.2 * len(labels) + 2, 1.2 * len(labels) + 1.5))
    try:
        image = ax.imshow(
            data,
            cmap="RdBu" if signed else "viridis",
            vmin=-limit if signed else 0.0,
            vmax=limit if signed else max(limit, 2.0),
        )
        ax.set_xticks(range(len(labels)), [str(l) for l in labels])
        ax.set_yticks(range(len(labels)), [str(l) for l in labels])
        ax.set_xlabel("domain")
        ax.set_ylabel("domain")
        for i in range(len(labels)):
            for j in range(len(labels)):
                ax.text(j, i, f"{data[i, j]:.2f}", ha="center", va="center", fontsize=8)
        fig.colorbar(image, ax=ax)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        path = Path(path)
        try:
            fig.savefig(path, dpi=100)
        except OSError as e:
            raise ReportError(f"cannot write plot: {e.strerror or e}", path=path)
    finally:
        plt.close(fig)
    return path
