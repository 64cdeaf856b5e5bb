"""Goal-driven tree decoding for geometry word problems, with formula-level operation trees."""
from .optree import (FormulaRegistry, OpTree, default_registry, evaluate, expand_formulas,
                     from_prefix, parse_infix, to_infix, to_prefix)

__version__ = "0.1.0"

__all__ = ["FormulaRegistry", "OpTree", "default_registry", "evaluate", "expand_formulas",
           "from_prefix", "parse_infix", "to_infix", "to_prefix", "__version__"]
