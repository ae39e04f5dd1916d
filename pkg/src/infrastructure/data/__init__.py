"""
Paquete de generación de los conjuntos de datos sintéticos.
"""