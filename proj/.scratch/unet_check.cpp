// Scratch: unet shape/param-count/forward sanity. Not part of the build.
#include <cstdio>

#include "fstk/unet.hpp"

using namespace fstk;

int main() {
  // Hand count for a depth-2 toy spec: enc [4,8], dec [4], k=3, H=8, in=1.
  // enc0: conv1 4*1*9+4=40, bn1 8, conv2 4*4*9+4=148, bn2 8       -> 204
  // enc1: conv1 8*4*9+8=296, bn1 16, conv2 8*8*9+8=584, bn2 16    -> 912
  // dec0: conv1 4*(8+4)*9+4=436, bn1 8, conv2 4*4*9+4=148, bn2 8  -> 600
  // out:  1*4*1+1=5
  // total 204+912+600+5 = 1721
  NetworkSpec toy;
  toy.height = 8;
  toy.width = 8;
  toy.encoder_filters = {4, 8};
  toy.decoder_filters = {4};
  LayoutManifest man = build_manifest(toy);
  printf("toy d = %lld (want 1721), entries=%zu, bns=%d\n", man.total, man.entries.size(),
         man.bn_count);

  NetworkSpec desk = NetworkSpec::desk();
  LayoutManifest dman = build_manifest(desk);
  printf("desk d = %lld\n", dman.total);

  NetworkSpec fiber = NetworkSpec::fiber();
  printf("fiber d = %lld\n", build_manifest(fiber).total);

  // forward shape + determinism
  NetworkState64 st = build_network(desk, 7);
  Tensor64 in({2, 1, 32, 32});
  Rng r(3);
  for (long long i = 0; i < in.numel(); ++i) in.data()[i] = r.normal();
  Tensor64 out = predict(st, in);
  printf("out shape %s finite=%d\n", shape_str(out.shape()).c_str(), (int)out.all_finite());
  NetworkState64 st2 = build_network(desk, 7);
  Tensor64 out2 = predict(st2, in);
  bool same = true;
  for (long long i = 0; i < out.numel(); ++i) same &= out.data()[i] == out2.data()[i];
  printf("rebuild same seed forward identical: %s\n", same ? "yes" : "NO");

  // flatten round trip
  std::vector<double> flat = flatten(st);
  printf("flat size %zu == d %lld\n", flat.size(), dman.total);
  NetworkState64 st3 = unflatten(desk, flat, st.running);
  bool rt = true;
  for (size_t e = 0; e < st.params.size(); ++e)
    for (long long i = 0; i < st.params[e].numel(); ++i)
      rt &= st.params[e].data()[i] == st3.params[e].data()[i];
  printf("flatten/unflatten identity: %s\n", rt ? "yes" : "NO");

  // bind_flat forward == bind_state forward
  {
    Tape64 t1, t2;
    auto v1 = bind_state(t1, st, true);
    Var64 i1 = t1.constant(in);
    Var64 o1 = unet_forward(st.spec, st.manifest, v1, st.running, i1);
    Var64 leaf = t2.leaf(Tensor64::from_data({(int)flat.size()}, flat), true);
    auto v2 = bind_flat(st.manifest, leaf);
    Var64 i2 = t2.constant(in);
    Var64 o2 = unet_forward(st.spec, st.manifest, v2, st.running, i2);
    bool eq = true;
    for (long long i = 0; i < o1.value().numel(); ++i)
      eq &= o1.value().data()[i] == o2.value().data()[i];
    printf("bind_flat forward == bind_state forward: %s\n", eq ? "yes" : "NO");
    // grad through flat leaf
    Var64 tgt = t2.constant(Tensor64({2, 1, 32, 32}, 0.0));
    Var64 loss = mse(o2, tgt);
    t2.backward(loss);
    const Tensor64& g = t2.grad(leaf);
    printf("flat grad numel %lld finite=%d\n", g.numel(), (int)g.all_finite());
  }

  // dropout at enc innermost: deterministic given seed, p=0 identity
  {
    NetworkSpec dspec = desk;
    dspec.dropout = {{"enc2", 0.2}};
    NetworkState64 sd = build_network(dspec, 7);
    Rng d1(11), d2(11), d3(12);
    ForwardOptions<double> o1;
    o1.dropout_rng = &d1;
    Tensor64 a = predict(sd, in, o1);
    ForwardOptions<double> o2;
    o2.dropout_rng = &d2;
    Tensor64 b = predict(sd, in, o2);
    ForwardOptions<double> o3;
    o3.dropout_rng = &d3;
    Tensor64 c = predict(sd, in, o3);
    bool eq = true, diff = false;
    for (long long i = 0; i < a.numel(); ++i) {
      eq &= a.data()[i] == b.data()[i];
      diff |= a.data()[i] != c.data()[i];
    }
    printf("dropout same-seed identical: %s, cross-seed differs: %s\n", eq ? "yes" : "NO",
           diff ? "yes" : "NO");
  }

  // bad spec: H=20 depth 3 (20 % 4 == 0 ok) -> use depth 5
  try {
    NetworkSpec bad;
    bad.height = 20;
    bad.width = 20;
    validate(bad);
    printf("bad spec: NOT caught\n");
  } catch (const config_error& e) {
    printf("bad spec caught: %s\n", e.what());
  }
  return 0;
}
