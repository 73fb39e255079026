"""tenstream: tensor-expression DSL to streaming accelerator designs.

Pipeline: parse/check a tensor DSL program, lower it to a value graph,
factorize contractions, schedule pipelined operator groups, lower to
streaming loop nests with buffer liveness, plan shared memory banks,
assemble the compute-unit/system design, and predict performance and
resources with an analytical simulator.  A reference interpreter and a
dataflow interpreter make the whole flow checkable at desk scale.
"""

from .formats import CustomFloat, Fixed, Float32, Float64, ScalarFormat, parse_format
from .frontend import check, parse, pretty_print
from .rewriter import cost, factorize_contractions
from .tensor_ir import (FlopCount, TensorGraph, count_flops,
                        count_flops_helmholtz, eval_reference, from_ast)

__version__ = "0.1.0"

__all__ = [
    "parse", "check", "pretty_print",
    "from_ast", "eval_reference", "count_flops", "count_flops_helmholtz",
    "factorize_contractions", "cost",
    "ScalarFormat", "Float64", "Float32", "Fixed", "CustomFloat",
    "parse_format", "FlopCount", "TensorGraph",
]
