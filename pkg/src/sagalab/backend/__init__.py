"""Generative backends, toy scene libraries and attention preprocessing."""

from .analytic import AnalyticBackend, BackendOutput, analytic_predict
from .attention import AttentionMaps, preprocess_attention
from .scenes import NeglectModel, PromptSpec, PrototypeLibrary, build_scene_dataset, make_prompts

__all__ = [
    "AnalyticBackend", "AttentionMaps", "BackendOutput", "NeglectModel", "PromptSpec", "PrototypeLibrary",
    "analytic_predict", "build_scene_dataset", "make_prompts", "preprocess_attention",
]
