# Low-light object detection