"""
Servicios de dominio.
"""