"""
Console rendering and SVG plots for the CAF desk.
"""
