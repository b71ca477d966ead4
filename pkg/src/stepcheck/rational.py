"""Exact rational rendering, parsing, and decimal formatting helpers."""

from __future__ import annotations

from fractions import Fraction


def render_rational(value: Fraction) -> str:
    """Render a rational in its shortest conventional form.

    Integers render bare ("42"), fractions with a terminating decimal
    expansion render as decimals ("0.2", "3.75"), everything else as "p/q".
    The output always parses back to the same value via parse_rational.
    """
    if value.denominator == 1:
        return str(value.numerator)
    den = value.denominator
    twos = fives = 0
    while den % 2 == 0:
        den //= 2
        twos += 1
    while den % 5 == 0:
        den //= 5
        fives += 1
    if den != 1:
        return f"{value.numerator}/{value.denominator}"
    digits = max(twos, fives)
    scaled = abs(value.numerator) * 10**digits // value.denominator
    text = str(scaled).rjust(digits + 1, "0")
    sign = "-" if value < 0 else ""
    return f"{sign}{text[:-digits]}.{text[-digits:]}"


def parse_rational(text: str) -> Fraction:
    """Parse "p/q", decimal, or integer literals exactly."""
    return Fraction(text.strip())


def format_decimal(value: Fraction, digits: int) -> str:
    """Format with a fixed number of decimals, rounding half away from zero."""
    negative = value < 0
    magnitude = -value if negative else value
    scaled = magnitude.numerator * 10**digits
    quotient, remainder = divmod(scaled, magnitude.denominator)
    if 2 * remainder >= magnitude.denominator:
        quotient += 1
    text = str(quotient).rjust(digits + 1, "0")
    if digits:
        text = f"{text[:-digits]}.{text[-digits:]}"
    if negative and quotient != 0:
        text = "-" + text
    return text


def format_percent(ratio: Fraction, digits: int = 1) -> str:
    """Format a 0..1 ratio as a percentage with fixed decimals."""
    return format_decimal(ratio * 100, digits)
