# views package
