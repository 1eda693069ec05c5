"""Slide-deck generation environment, rewards, and GRPO lab."""
