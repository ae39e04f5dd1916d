"""
Paquete de dominio del laboratorio.
"""
