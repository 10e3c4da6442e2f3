"""Model runtimes: a deterministic mock and a best-effort transformers hook.

A runtime turns (image, prompt tokens) into generated token texts plus, for
each generated token, the attention it paid to every context position, kept
per layer and head. Positions are ordered: P*P visual patches, then the
prompt text tokens, then previously generated tokens.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ModelUnavailable


@dataclass
class GenerationOutput:
    token_texts: list[str]  # generated tokens, in order
    input_text_tokens: list[str]  # prompt tokens the model attended to
    patch_grid_side: int
    num_layers: int
    num_heads: int
    # one [num_layers, num_heads, n_positions(r)] array per generated token r,
    # rows normalized over all positions
    attentions: list[np.ndarray]


class MockRuntime:
    """Deterministic stand-in runtime; no model download required.

    Emits a tagged inspection response whose per-token attention is random
    but reproducible for a fixed (seed, image) pair. With tagged=False the
    response carries no answer tags, exercising the tag-parse fallback.
    """

    def __init__(self, seed: int = 0, tagged: bool = True, patch_grid_side: int = 6,
                 num_layers: int = 3, num_heads: int = 4):
        self.seed = seed
        self.tagged = tagged
        self.patch_grid_side = patch_grid_side
        self.num_layers = num_layers
        self.num_heads = num_heads

    def generate(self, image: np.ndarray, prompt_tokens: list[str]) -> GenerationOutput:
        digest = hashlib.sha256(np.ascontiguousarray(image).tobytes()).digest()
        rng = np.random.default_rng([self.seed, int.from_bytes(digest[:8], "little")])
        if self.tagged:
            texts = [
                "<think>", "the", "surface", "shows", "a", "small", "defect",
                "near", "the", "edge", "</think>", "<answer>", "Yes", "</answer>",
            ]
        else:
            texts = ["the", "surface", "shows", "a", "defect", "Yes"]
        P2 = self.patch_grid_side * self.patch_grid_side
        n_i = len(prompt_tokens)
        attentions = []
        for r in range(len(texts)):
            raw = rng.gamma(0.7, 1.0, (self.num_layers, self.num_heads, P2 + n_i + r))
            attentions.append((raw / raw.sum(axis=2, keepdims=True)).astype(np.float64))
        return GenerationOutput(
            token_texts=texts,
            input_text_tokens=list(prompt_tokens),
            patch_grid_side=self.patch_grid_side,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            attentions=attentions,
        )


class TransformersVlmRuntime:
    """Attention capture through a HuggingFace vision-language model.

    Works for models whose processor exposes an image token id, so the visual
    span inside the encoded sequence can be located, and whose generate()
    returns per-step attentions. Anything missing raises ModelUnavailable
    with the underlying reason.
    """

    def __init__(self, model_id: str):
        try:
            import torch  # noqa: F401
            from transformers import AutoModelForImageTextToText, AutoProcessor
        except Exception as exc:  # pragma: no cover - import environment specific
            raise ModelUnavailable(f"transformers/torch unavailable: {exc}") from exc
        try:
            self.processor = AutoProcessor.from_pretrained(model_id)
            self.model = AutoModelForImageTextToText.from_pretrained(
                model_id, output_attentions=True, attn_implementation="eager"
            )
        except Exception as exc:
            raise ModelUnavailable(f"could not load model {model_id!r}: {exc}") from exc
        self.model_id = model_id

    def generate(self, image: np.ndarray, prompt_tokens: list[str]) -> GenerationOutput:
        import torch
        from PIL import Image

        prompt = " ".join(prompt_tokens)
        inputs = self.processor(
            images=Image.fromarray(image), text=prompt, return_tensors="pt"
        )
        image_token_id = getattr(self.model.config, "image_token_id", None) or getattr(
            self.model.config, "image_token_index", None
        )
        if image_token_id is None:
            raise ModelUnavailable(f"{self.model_id}: config exposes no image token id")
        input_ids = inputs["input_ids"][0]
        visual_pos = (input_ids == image_token_id).nonzero(as_tuple=True)[0].tolist()
        text_pos = [i for i in range(len(input_ids)) if i not in set(visual_pos)]
        if not visual_pos:
            raise ModelUnavailable(f"{self.model_id}: no visual positions in encoding")
        side = int(round(len(visual_pos) ** 0.5))
        if side * side != len(visual_pos):
            raise ModelUnavailable(
                f"{self.model_id}: visual span {len(visual_pos)} is not a square patch grid"
            )
        with torch.no_grad():
            out = self.model.generate(
                **inputs,
                max_new_tokens=128,
                do_sample=False,
                output_attentions=True,
                return_dict_in_generate=True,
            )
        if not getattr(out, "attentions", None):
            raise ModelUnavailable(f"{self.model_id}: generate() returned no attentions")
        generated = out.sequences[0][len(input_ids):]
        texts = [self.processor.decode([t]) for t in generated]
        n_prompt = len(input_ids)
        attentions = []
        for step, layer_stack in enumerate(out.attentions):
            # layer_stack: tuple over layers of [batch, heads, q, k]; take the
            # last query row and reorder keys as visual, text, generated
            rows = torch.stack([layer[0, :, -1, :] for layer in layer_stack])
            keys = rows.shape[-1]
            order = visual_pos + text_pos + list(range(n_prompt, keys))
            attentions.append(rows[:, :, order].to(torch.float64).cpu().numpy())
        return GenerationOutput(
            token_texts=texts,
            input_text_tokens=[self.processor.decode([t]) for t in input_ids[text_pos]],
            patch_grid_side=side,
            num_layers=len(out.attentions[0]),
            num_heads=attentions[0].shape[1],
            attentions=attentions,
        )


def get_runtime(model_id: str, seed: int = 0):
    """Build a runtime: "mock" / "mock-untagged" or a transformers model id."""
    if model_id == "mock":
        return MockRuntime(seed=seed)
    if model_id == "mock-untagged":
        return MockRuntime(seed=seed, tagged=False)
    return TransformersVlmRuntime(model_id)
