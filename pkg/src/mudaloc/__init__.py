"""CSI fingerprint localization with multi-source unsupervised domain
adaptation.

Subpackages are imported lazily by the CLI so thread caps can be applied
before numpy loads; library users import submodules directly, e.g.
``from mudaloc import filters``.
"""

__version__ = "0.1.0"
