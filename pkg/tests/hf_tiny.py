"""Tiny randomly initialised Qwen2-VL for adapter tests (no downloads)."""
from __future__ import annotations

from vlbind.scenegen.palette import COLOR_NAMES, SHAPES


def tiny_qwen2vl_backend(seed: int = 0):
    import torch
    from tokenizers import Tokenizer, models, pre_tokenizers
    from transformers import (
        PreTrainedTokenizerFast,
        Qwen2VLConfig,
        Qwen2VLForConditionalGeneration,
        Qwen2VLImageProcessor,
    )

    from vlbind.backend.hf_qwen2vl import Qwen2VLBackend
    from vlbind.backend.tokenizer import _TEMPLATE_WORDS

    words = ["<unk>", "<|vision_start|>", "<|vision_end|>", "<|image_pad|>", ",", "."]
    words += [str(i) for i in range(1, 17)] + list(COLOR_NAMES) + list(SHAPES) + list(_TEMPLATE_WORDS)
    vocab = {w: i for i, w in enumerate(dict.fromkeys(words))}
    tk = Tokenizer(models.WordLevel(vocab, unk_token="<unk>"))
    tk.pre_tokenizer = pre_tokenizers.Sequence([pre_tokenizers.Whitespace()])
    tok = PreTrainedTokenizerFast(tokenizer_object=tk, unk_token="<unk>")
    torch.manual_seed(seed)
    cfg = Qwen2VLConfig(
        text_config=dict(
            vocab_size=len(vocab),
            hidden_size=32,
            intermediate_size=64,
            num_hidden_layers=3,
            num_attention_heads=4,
            num_key_value_heads=2,
            rope_parameters={"rope_type": "default", "rope_theta": 10000.0, "mrope_section": [1, 1, 2]},
        ),
        vision_config=dict(depth=1, embed_dim=16, hidden_size=32, num_heads=2, mlp_ratio=2),
        image_token_id=vocab["<|image_pad|>"],
        vision_start_token_id=vocab["<|vision_start|>"],
        vision_end_token_id=vocab["<|vision_end|>"],
        bos_token_id=None,
        eos_token_id=None,
        attn_implementation="eager",
    )
    model = Qwen2VLForConditionalGeneration(cfg).float()
    return Qwen2VLBackend(model, tok, Qwen2VLImageProcessor())
