"""Toy ViT-style encoder, DINO-style head, losses and the training step."""
