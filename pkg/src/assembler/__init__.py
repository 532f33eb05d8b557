"""Anchor-point diffusion for 3D part assembly.

Pipeline: curate or generate part datasets, build sparse anchor
representations, train a masked diffusion transformer to generate
assembled anchor clouds, recover per-part rigid poses by least-squares
fitting, and evaluate with chamfer-based assembly metrics.
"""

__version__ = "0.1.0"
