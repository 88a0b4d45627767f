"""Desk-scale checkpoint lab.

Manufactures the five checkpoints of the base/instruct/continual-pretrain
lifecycle with a tiny decoder-only transformer, exports them in the
checkpoint container format, and verifies, through the resforge CLI rather
than in-process math, that instruction capability is carried by the weight
residual between an instruct model and its base.
"""

__version__ = "0.1.0"
