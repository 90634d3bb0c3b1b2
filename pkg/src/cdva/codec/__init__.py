"""Bit-exact descriptor bitstream."""
