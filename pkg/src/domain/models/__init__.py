"""
Modelos de dominio.
"""