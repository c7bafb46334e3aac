"""
Sample Corpus Generator for forgesem
Writes a small synthetic forgery corpus next to this script for quick demos.
"""

import os
import sys
from collections import Counter

from rich.console import Console
from rich.panel import Panel
from rich.progress import Progress, SpinnerColumn, TextColumn
from rich.table import Table

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), ".."))

from src.corpus import CorpusSpec, gen_corpus  # noqa: E402

console = Console()


def main():
    """Generate the sample corpus."""
    script_dir = os.path.dirname(os.path.abspath(__file__))
    output_dir = os.path.join(script_dir, "sample_corpus")

    banner = """
[bold cyan]Synthetic Forgery Corpus Generator[/bold cyan]
Smooth real images and spliced fakes with shared and method-specific artifacts
    """
    console.print(Panel(banner, border_style="cyan"))
    console.print(f"\n[dim]Output directory: {output_dir}[/dim]\n")

    spec = CorpusSpec(n_real=40, n_fake_per_method=20, image_size=32, seed=42)

    with Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        console=console,
        transient=True
    ) as progress:
        task = progress.add_task("[cyan]Generating sample_corpus...", total=None)
        manifest = gen_corpus(spec, output_dir)
        progress.update(task, completed=True)
    console.print(f"[green]Generated {len(manifest.records)} images[/green] "
                  f"({spec.n_real} real, {spec.n_fake_per_method} per method)\n")

    counts = Counter((r.method, r.split) for r in manifest.records)
    table = Table(show_header=True, header_style="bold magenta")
    table.add_column("Method", width=16)
    for split in ("train", "val", "test"):
        table.add_column(split, justify="right")
    for method in ["real", *spec.methods]:
        table.add_row(method, *(str(counts[(method, split)]) for split in ("train", "val", "test")))
    console.print(table)


if __name__ == "__main__":
    main()
