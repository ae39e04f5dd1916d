"""
Paquete de interfaz de línea de comandos.
"""