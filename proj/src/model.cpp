#include "microbia/model.hpp"

#include <fstream>
#include <map>
#include <sstream>
#include <type_traits>

#include "json.hpp"

namespace microbia {

namespace {

// The network as a linear chain of stages. Stage i maps position i to
// position i + 1; ForwardTrace::activations holds all 21 positions.
enum class Op { Conv, BatchNorm, Relu, Pool, Flatten, Dropout, Dense };

struct Stage {
  Op op;
  int index;  // which conv / bn / pool / dropout / dense
};

constexpr std::array<Stage, 20> kStages = {{
    {Op::Conv, 0}, {Op::BatchNorm, 0}, {Op::Relu, 0}, {Op::Pool, 0},
    {Op::Conv, 1}, {Op::BatchNorm, 1}, {Op::Relu, 0}, {Op::Pool, 1},
    {Op::Conv, 2}, {Op::Relu, 0},      {Op::Pool, 2},
    {Op::Conv, 3}, {Op::Relu, 0},      {Op::Pool, 3},
    {Op::Flatten, 0}, {Op::Dropout, 0},
    {Op::Dense, 0}, {Op::Relu, 0}, {Op::Dropout, 1},
    {Op::Dense, 1},
}};

constexpr std::size_t kPositions = kStages.size() + 1;

constexpr std::size_t tap_position(Tap tap) {
  switch (tap) {
    case Tap::Input: return 0;
    case Tap::Conv1Out: return 3;
    case Tap::Conv2Out: return 7;
    case Tap::Conv3Out: return 10;
    case Tap::Conv4Out: return 13;
    case Tap::FlattenOut: return 15;
    case Tap::Fc1Out: return 18;
    case Tap::Logits: return 20;
  }
  return 20;
}

constexpr std::array<std::pair<Tap, std::string_view>, 8> kTapNames = {{
    {Tap::Input, "input"},
    {Tap::Conv1Out, "conv1_out"},
    {Tap::Conv2Out, "conv2_out"},
    {Tap::Conv3Out, "conv3_out"},
    {Tap::Conv4Out, "conv4_out"},
    {Tap::FlattenOut, "flatten_out"},
    {Tap::Fc1Out, "fc1_out"},
    {Tap::Logits, "logits"},
}};

// Index of a stage's parameters within parameters().
constexpr std::size_t conv_param(int i) { return 2 * static_cast<std::size_t>(i); }
constexpr std::size_t bn_param(int i) { return 8 + 2 * static_cast<std::size_t>(i); }
constexpr std::size_t dense_param(int i) { return 12 + 2 * static_cast<std::size_t>(i); }

template <typename Model>
auto& dense_of(Model& m, int i) {
  return i == 0 ? m.fc1 : m.head;
}

// Runs stages [begin, end). Model may be const (eval-only path).
template <typename T, typename Model>
void run_stages(Model& model, ForwardTrace<T>& trace, std::size_t begin, std::size_t end,
                Rng* rng) {
  constexpr bool kConst = std::is_const_v<Model>;
  const Mode mode = trace.mode;
  auto& acts = trace.activations;
  for (std::size_t i = begin; i < end; ++i) {
    const Stage st = kStages[i];
    const BasicTensor<T>& x = acts[i];
    switch (st.op) {
      case Op::Conv:
        acts[i + 1] = conv2d_forward(x, model.conv[st.index]);
        break;
      case Op::BatchNorm:
        if constexpr (kConst) {
          acts[i + 1] = batchnorm_forward(x, model.bn[st.index], &trace.bn_cache[st.index]);
        } else {
          acts[i + 1] = batchnorm_forward(x, model.bn[st.index], mode, &trace.bn_cache[st.index]);
        }
        break;
      case Op::Relu:
        acts[i + 1] = relu_forward(x);
        break;
      case Op::Pool: {
        auto r = maxpool2x2_forward(x);
        acts[i + 1] = std::move(r.output);
        trace.pool_argmax[st.index] = std::move(r.argmax);
        break;
      }
      case Op::Flatten:
        acts[i + 1] = flatten(x);
        break;
      case Op::Dropout: {
        if (mode == Mode::Train && rng == nullptr)
          throw StateError("forward: train-mode dropout needs an Rng");
        Rng unused(0);
        acts[i + 1] = dropout_forward(x, model.arch.dropout, mode, rng ? *rng : unused,
                                      &trace.dropout_mask[st.index]);
        break;
      }
      case Op::Dense:
        acts[i + 1] = dense_forward(x, dense_of(model, st.index));
        break;
    }
  }
  trace.computed = std::max(trace.computed, end + 1);
}

template <typename T>
void check_input(const Architecture& arch, const BasicTensor<T>& input) {
  if (input.rank() != 4 || input.dim(1) != 3 || input.dim(2) != arch.input_size ||
      input.dim(3) != arch.input_size)
    throw DimensionError("forward: expected B x 3 x " + std::to_string(arch.input_size) + " x " +
                         std::to_string(arch.input_size) + " input, got " +
                         shape_string(input.shape()));
}

template <typename T>
ForwardTrace<T> new_trace(const BasicModelState<T>& model, Mode mode) {
  ForwardTrace<T> trace;
  trace.activations.resize(kPositions);
  trace.mode = mode;
  trace.model_id = &model;
  trace.generation = model.generation;
  return trace;
}

}  // namespace

// ---------------------------------------------------------------------------

Architecture Architecture::microbianet(std::size_t outputs) {
  Architecture a;
  a.outputs = outputs;
  return a;
}

std::size_t Architecture::conv_output_size(std::size_t layer) const {
  std::size_t s = input_size;
  for (std::size_t l = 0; l <= layer; ++l) {
    if (s < kernels[l])
      throw DimensionError("architecture: conv" + std::to_string(l + 1) + " kernel " +
                           std::to_string(kernels[l]) + " exceeds input " + std::to_string(s));
    s = s - kernels[l] + 1;
    if (l == layer) return s;
    if (s % 2 != 0)
      throw DimensionError("architecture: conv" + std::to_string(l + 1) + " output " +
                           std::to_string(s) + " is odd and cannot be pooled");
    s /= 2;
  }
  return s;
}

std::size_t Architecture::flatten_width() const {
  const std::size_t s = conv_output_size(3);
  if (s % 2 != 0)
    throw DimensionError("architecture: conv4 output " + std::to_string(s) + " is odd");
  return channels[3] * (s / 2) * (s / 2);
}

void Architecture::validate() const {
  for (std::size_t l = 0; l < 4; ++l)
    if (channels[l] == 0 || kernels[l] == 0)
      throw DimensionError("architecture: channels and kernels must be positive");
  if (hidden == 0 || outputs < 2) throw DimensionError("architecture: bad dense sizes");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ParameterError("architecture: dropout in [0, 1)");
  (void)flatten_width();
}

std::string_view tap_name(Tap tap) {
  for (const auto& [t, name] : kTapNames)
    if (t == tap) return name;
  return "logits";
}

Tap parse_tap(std::string_view name) {
  for (const auto& [t, n] : kTapNames)
    if (n == name) return t;
  throw ParameterError("unknown tap '" + std::string(name) + "'");
}

Tap conv_tap(std::size_t layer) {
  constexpr Tap taps[] = {Tap::Conv1Out, Tap::Conv2Out, Tap::Conv3Out, Tap::Conv4Out};
  if (layer >= 4) throw ParameterError("conv layer index " + std::to_string(layer) + " not in 0..3");
  return taps[layer];
}

std::size_t expected_parameter_count(const Architecture& arch) {
  std::size_t n = 0, in = 3;
  for (std::size_t l = 0; l < 4; ++l) {
    n += arch.channels[l] * in * arch.kernels[l] * arch.kernels[l] + arch.channels[l];
    in = arch.channels[l];
  }
  n += 2 * arch.channels[0] + 2 * arch.channels[1];  // batch-norm gamma and beta
  n += arch.flatten_width() * arch.hidden + arch.hidden;
  n += arch.hidden * arch.outputs + arch.outputs;
  return n;
}

// ---------------------------------------------------------------------------

template <typename T>
BasicModelState<T> BasicModelState<T>::initialize(const Architecture& arch, Rng& rng) {
  arch.validate();
  BasicModelState m;
  m.arch = arch;
  std::size_t in = 3;
  for (std::size_t l = 0; l < 4; ++l) {
    const std::size_t k = arch.kernels[l];
    const std::size_t fan_in = in * k * k;
    m.conv[l].weight = kaiming_normal<T>({arch.channels[l], in, k, k}, fan_in, rng);
    m.conv[l].bias = BasicTensor<T>({arch.channels[l]});
    in = arch.channels[l];
  }
  m.bn[0] = BatchNormParams<T>::identity(arch.channels[0]);
  m.bn[1] = BatchNormParams<T>::identity(arch.channels[1]);
  const std::size_t flat = arch.flatten_width();
  m.fc1.weight = kaiming_normal<T>({arch.hidden, flat}, flat, rng);
  m.fc1.bias = BasicTensor<T>({arch.hidden});
  m.head.weight = kaiming_normal<T>({arch.outputs, arch.hidden}, arch.hidden, rng);
  m.head.bias = BasicTensor<T>({arch.outputs});
  return m;
}

template <typename T>
LabelScheme BasicModelState<T>::scheme() const {
  if (arch.outputs == kSevenClasses) return LabelScheme::Seven;
  if (arch.outputs == kFourClasses) return LabelScheme::Four;
  throw SchemeError("model with " + std::to_string(arch.outputs) + " outputs has no label scheme");
}

template <typename T>
std::vector<BasicTensor<T>*> BasicModelState<T>::parameters() {
  return {&conv[0].weight, &conv[0].bias, &conv[1].weight, &conv[1].bias,
          &conv[2].weight, &conv[2].bias, &conv[3].weight, &conv[3].bias,
          &bn[0].gamma,    &bn[0].beta,   &bn[1].gamma,    &bn[1].beta,
          &fc1.weight,     &fc1.bias,     &head.weight,    &head.bias};
}

template <typename T>
std::vector<const BasicTensor<T>*> BasicModelState<T>::parameters() const {
  auto mut = const_cast<BasicModelState*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

template <typename T>
std::vector<std::string> BasicModelState<T>::parameter_names() {
  return {"conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "conv3.weight", "conv3.bias",
          "conv4.weight", "conv4.bias", "bn1.gamma",    "bn1.beta",   "bn2.gamma",    "bn2.beta",
          "fc1.weight",   "fc1.bias",   "head.weight",  "head.bias"};
}

template <typename T>
std::vector<std::pair<std::string, BasicTensor<T>*>> BasicModelState<T>::state_tensors() {
  std::vector<std::pair<std::string, BasicTensor<T>*>> out;
  const auto names = parameter_names();
  const auto params = parameters();
  for (std::size_t i = 0; i < params.size(); ++i) out.emplace_back(names[i], params[i]);
  out.emplace_back("bn1.running_mean", &bn[0].running_mean);
  out.emplace_back("bn1.running_var", &bn[0].running_var);
  out.emplace_back("bn2.running_mean", &bn[1].running_mean);
  out.emplace_back("bn2.running_var", &bn[1].running_var);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const BasicTensor<T>*>> BasicModelState<T>::state_tensors()
    const {
  auto mut = const_cast<BasicModelState*>(this)->state_tensors();
  return {mut.begin(), mut.end()};
}

template <typename T>
std::size_t BasicModelState<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += p->size();
  return n;
}

template <typename T>
template <typename U>
BasicModelState<U> BasicModelState<T>::cast() const {
  BasicModelState<U> out;
  out.arch = arch;
  out.mode = mode;
  out.normalization = normalization;
  for (std::size_t l = 0; l < 4; ++l)
    out.conv[l] = {conv[l].weight.template cast<U>(), conv[l].bias.template cast<U>()};
  for (std::size_t b = 0; b < 2; ++b) {
    out.bn[b].gamma = bn[b].gamma.template cast<U>();
    out.bn[b].beta = bn[b].beta.template cast<U>();
    out.bn[b].running_mean = bn[b].running_mean.template cast<U>();
    out.bn[b].running_var = bn[b].running_var.template cast<U>();
    out.bn[b].momentum = bn[b].momentum;
    out.bn[b].epsilon = bn[b].epsilon;
  }
  out.fc1 = {fc1.weight.template cast<U>(), fc1.bias.template cast<U>()};
  out.head = {head.weight.template cast<U>(), head.bias.template cast<U>()};
  return out;
}

// ---------------------------------------------------------------------------

template <typename T>
const BasicTensor<T>& ForwardTrace<T>::tap(Tap t) const {
  const std::size_t pos = tap_position(t);
  if (pos >= computed || pos >= activations.size())
    throw StateError("trace does not reach tap " + std::string(tap_name(t)));
  return activations[pos];
}

template <typename T>
ForwardTrace<T> forward(BasicModelState<T>& model, const BasicTensor<T>& input, Rng* rng,
                        Tap until) {
  check_input(model.arch, input);
  if (model.mode == Mode::Train) ++model.generation;  // running statistics change
  ForwardTrace<T> trace = new_trace(model, model.mode);
  trace.activations[0] = input;
  trace.computed = 1;
  run_stages<T>(model, trace, 0, tap_position(until), rng);
  return trace;
}

template <typename T>
ForwardTrace<T> forward_eval(const BasicModelState<T>& model, const BasicTensor<T>& input,
                             Tap until) {
  if (model.mode != Mode::Eval) throw StateError("forward_eval: model is in train mode");
  check_input(model.arch, input);
  ForwardTrace<T> trace = new_trace(model, Mode::Eval);
  trace.activations[0] = input;
  trace.computed = 1;
  run_stages<T>(model, trace, 0, tap_position(until), nullptr);
  return trace;
}

template <typename T>
BasicTensor<T> forward_from(const BasicModelState<T>& model, Tap from,
                            const BasicTensor<T>& activation) {
  if (model.mode != Mode::Eval) throw StateError("forward_from: model is in train mode");
  ForwardTrace<T> trace = new_trace(model, Mode::Eval);
  const std::size_t pos = tap_position(from);
  trace.activations[pos] = activation;
  trace.computed = pos + 1;
  run_stages<T>(model, trace, pos, kStages.size(), nullptr);
  return trace.activations.back();
}

template <typename T>
BackwardResult<T> backward(const BasicModelState<T>& model, const ForwardTrace<T>& trace,
                           const BasicTensor<T>& grad, Tap from, Tap to, bool want_param_grads,
                           bool want_target_grad) {
  if (trace.model_id != &model || trace.generation != model.generation)
    throw StateError("backward: trace is stale (model changed since the forward pass)");
  const std::size_t pf = tap_position(from), pt = tap_position(to);
  if (pt > pf) throw ParameterError("backward: target tap lies after the source tap");
  if (pf >= trace.computed) throw StateError("backward: trace does not reach the source tap");
  require_shape(grad, trace.activations[pf].shape(), "backward gradient");

  BackwardResult<T> result;
  if (want_param_grads)
    for (const auto* p : model.parameters()) result.param_grads.emplace_back(p->shape());

  const auto& acts = trace.activations;
  BasicTensor<T> g = grad;
  for (std::size_t i = pf; i-- > pt;) {
    const Stage st = kStages[i];
    const bool need_input = i > pt || want_target_grad;
    switch (st.op) {
      case Op::Conv: {
        auto r = conv2d_backward(acts[i], model.conv[st.index], g, need_input, want_param_grads);
        if (want_param_grads) {
          result.param_grads[conv_param(st.index)] = std::move(r.weight);
          result.param_grads[conv_param(st.index) + 1] = std::move(r.bias);
        }
        g = std::move(r.input);
        break;
      }
      case Op::BatchNorm: {
        auto r = batchnorm_backward(g, model.bn[st.index], trace.bn_cache[st.index]);
        if (want_param_grads) {
          result.param_grads[bn_param(st.index)] = std::move(r.gamma);
          result.param_grads[bn_param(st.index) + 1] = std::move(r.beta);
        }
        g = std::move(r.input);
        break;
      }
      case Op::Relu:
        g = relu_backward(g, acts[i + 1]);
        break;
      case Op::Pool:
        g = maxpool2x2_backward(g, trace.pool_argmax[st.index], acts[i].shape());
        break;
      case Op::Flatten:
        g = std::move(g).reshaped(acts[i].shape());
        break;
      case Op::Dropout:
        g = dropout_backward(g, std::span<const T>(trace.dropout_mask[st.index]));
        break;
      case Op::Dense: {
        const auto& params = st.index == 0 ? model.fc1 : model.head;
        auto r = dense_backward(acts[i], params, g, need_input, want_param_grads);
        if (want_param_grads) {
          result.param_grads[dense_param(st.index)] = std::move(r.weight);
          result.param_grads[dense_param(st.index) + 1] = std::move(r.bias);
        }
        g = std::move(r.input);
        break;
      }
    }
  }
  result.grad = std::move(g);
  return result;
}

template <typename T>
BasicTensor<T> class_score_gradient(const BasicModelState<T>& model, const BasicTensor<T>& image,
                                    std::size_t class_index, Tap tap) {
  if (model.mode != Mode::Eval) throw StateError("class_score_gradient: model must be in eval mode");
  if (class_index >= model.num_outputs())
    throw ParameterError("class_score_gradient: class " + std::to_string(class_index) +
                         " outside " + std::to_string(model.num_outputs()) + " outputs");
  if (tap == Tap::Logits) throw ParameterError("class_score_gradient: tap must precede the logits");
  BasicTensor<T> batch = image.rank() == 3 ? image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)})
                                           : image;
  if (batch.dim(0) != 1) throw DimensionError("class_score_gradient: expects a single image");
  const ForwardTrace<T> trace = forward_eval(model, batch);
  BasicTensor<T> seed({1, model.num_outputs()});
  seed[class_index] = T{1};
  auto r = backward(model, trace, seed, Tap::Logits, tap, false);
  Shape s(r.grad.shape().begin() + 1, r.grad.shape().end());
  return std::move(r.grad).reshaped(std::move(s));
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr int kCheckpointVersion = 1;
constexpr std::string_view kCheckpointFormat = "microbia-checkpoint";

nlohmann::json arch_to_json(const Architecture& a) {
  return {{"input_size", a.input_size}, {"channels", a.channels}, {"kernels", a.kernels},
          {"hidden", a.hidden},         {"outputs", a.outputs},   {"dropout", a.dropout}};
}

Architecture arch_from_json(const nlohmann::json& j) {
  Architecture a;
  a.input_size = j.at("input_size").get<std::size_t>();
  a.channels = j.at("channels").get<std::array<std::size_t, 4>>();
  a.kernels = j.at("kernels").get<std::array<std::size_t, 4>>();
  a.hidden = j.at("hidden").get<std::size_t>();
  a.outputs = j.at("outputs").get<std::size_t>();
  a.dropout = j.at("dropout").get<double>();
  return a;
}

}  // namespace

void checkpoint_save(const std::filesystem::path& path, const ModelState& model,
                     const AdamState<float>* optimizer) {
  std::vector<std::pair<std::string, const Tensor*>> entries;
  for (const auto& e : model.state_tensors()) entries.push_back(e);
  if (optimizer) {
    const auto names = ModelState::parameter_names();
    if (optimizer->first_moment.size() == names.size())
      for (std::size_t i = 0; i < names.size(); ++i) {
        entries.emplace_back("adam.m." + names[i], &optimizer->first_moment[i]);
        entries.emplace_back("adam.v." + names[i], &optimizer->second_moment[i]);
      }
  }
  nlohmann::ordered_json index;
  index["format"] = kCheckpointFormat;
  index["version"] = kCheckpointVersion;
  index["outputs"] = model.arch.outputs;
  index["architecture"] = arch_to_json(model.arch);
  index["batchnorm"] = {{"momentum", model.bn[0].momentum}, {"epsilon", model.bn[0].epsilon}};
  if (model.normalization)
    index["normalization"] = {{"mean", model.normalization->mean},
                              {"std", model.normalization->stddev}};
  if (optimizer) {
    const auto& c = optimizer->config;
    index["optimizer"] = {{"step_count", optimizer->step_count},
                          {"learning_rate", c.learning_rate},
                          {"beta1", c.beta1},
                          {"beta2", c.beta2},
                          {"epsilon", c.epsilon},
                          {"weight_decay", c.weight_decay},
                          {"decoupled_weight_decay", c.decoupled_weight_decay}};
  }
  std::ostringstream body(std::ios::binary);
  nlohmann::ordered_json list = nlohmann::ordered_json::array();
  for (const auto& [name, t] : entries) {
    const auto offset = static_cast<std::size_t>(body.tellp());
    write_tensor(body, *t);
    list.push_back({{"name", name}, {"offset", offset}, {"bytes", dump_size(*t)}});
  }
  index["entries"] = std::move(list);
  const std::string payload = body.str();
  index["body_bytes"] = payload.size();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out << index.dump() << "\n";
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw CheckpointError("write failed: " + path.string());
}

Checkpoint checkpoint_load(const std::filesystem::path& path,
                           std::optional<std::size_t> expected_outputs) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint not found: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw CheckpointError(path.string() + ": empty checkpoint");
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": unreadable index: " + e.what());
  }
  const auto fail = [&](const std::string& msg) -> void {
    throw CheckpointError(path.string() + ": " + msg);
  };
  if (index.value("format", "") != kCheckpointFormat) fail("not a microbia checkpoint");
  if (index.value("version", 0) != kCheckpointVersion)
    fail("unsupported checkpoint version " + std::to_string(index.value("version", 0)));
  const auto outputs = index.at("outputs").get<std::size_t>();
  if (expected_outputs && *expected_outputs != outputs)
    fail("checkpoint has " + std::to_string(outputs) + " outputs, session expects " +
         std::to_string(*expected_outputs));

  std::string body((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (body.size() != index.value("body_bytes", std::size_t{0})) fail("truncated or padded body");

  Checkpoint ck;
  try {
    const Architecture arch = arch_from_json(index.at("architecture"));
    arch.validate();
    if (arch.outputs != outputs) fail("scheme tag disagrees with architecture");
    Rng rng(0);
    ck.model = ModelState::initialize(arch, rng);
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    fail(std::string("bad architecture: ") + e.what());
  }
  if (index.contains("batchnorm"))
    for (auto& b : ck.model.bn) {
      b.momentum = index["batchnorm"].at("momentum").get<double>();
      b.epsilon = index["batchnorm"].at("epsilon").get<double>();
    }
  if (index.contains("normalization")) {
    ChannelStats s;
    s.mean = index["normalization"].at("mean").get<std::array<double, 3>>();
    s.stddev = index["normalization"].at("std").get<std::array<double, 3>>();
    ck.model.normalization = s;
  }

  std::map<std::string, std::pair<std::size_t, std::size_t>> where;
  for (const auto& e : index.at("entries"))
    where[e.at("name").get<std::string>()] = {e.at("offset").get<std::size_t>(),
                                              e.at("bytes").get<std::size_t>()};
  const auto read_entry = [&](const std::string& name, Tensor& dst) {
    const auto it = where.find(name);
    if (it == where.end()) fail("missing entry " + name);
    const auto [offset, bytes] = it->second;
    if (offset + bytes > body.size()) fail("entry " + name + " runs past the end of the file");
    std::istringstream s(body.substr(offset, bytes), std::ios::binary);
    Tensor t;
    try {
      t = read_tensor<float>(s);
    } catch (const Error& e) {
      fail("entry " + name + ": " + e.what());
    }
    if (t.shape() != dst.shape())
      fail("entry " + name + " has shape " + shape_string(t.shape()) + ", expected " +
           shape_string(dst.shape()));
    dst = std::move(t);
  };
  for (auto& [name, t] : ck.model.state_tensors()) read_entry(name, *t);
  for (const auto& b : ck.model.bn)
    for (float v : b.running_var.values())
      if (!(v > 0.0f)) fail("non-positive batch-norm running variance");

  if (index.contains("optimizer")) {
    AdamState<float> opt;
    const auto& o = index["optimizer"];
    opt.step_count = o.at("step_count").get<std::uint64_t>();
    opt.config.learning_rate = o.at("learning_rate").get<double>();
    opt.config.beta1 = o.at("beta1").get<double>();
    opt.config.beta2 = o.at("beta2").get<double>();
    opt.config.epsilon = o.at("epsilon").get<double>();
    opt.config.weight_decay = o.at("weight_decay").get<double>();
    opt.config.decoupled_weight_decay = o.at("decoupled_weight_decay").get<bool>();
    const auto names = ModelState::parameter_names();
    const auto params = ck.model.parameters();
    if (where.count("adam.m." + names[0])) {
      for (std::size_t i = 0; i < names.size(); ++i) {
        opt.first_moment.emplace_back(params[i]->shape());
        opt.second_moment.emplace_back(params[i]->shape());
        read_entry("adam.m." + names[i], opt.first_moment.back());
        read_entry("adam.v." + names[i], opt.second_moment.back());
      }
    }
    ck.optimizer = std::move(opt);
  }
  ck.model.mode = Mode::Eval;
  return ck;
}

// ---------------------------------------------------------------------------

#define MICROBIA_INSTANTIATE(T)                                                                  \
  template struct BasicModelState<T>;                                                            \
  template struct ForwardTrace<T>;                                                               \
  template ForwardTrace<T> forward(BasicModelState<T>&, const BasicTensor<T>&, Rng*, Tap);       \
  template ForwardTrace<T> forward_eval(const BasicModelState<T>&, const BasicTensor<T>&, Tap);  \
  template BasicTensor<T> forward_from(const BasicModelState<T>&, Tap, const BasicTensor<T>&);   \
  template BackwardResult<T> backward(const BasicModelState<T>&, const ForwardTrace<T>&,         \
                                      const BasicTensor<T>&, Tap, Tap, bool, bool);                  \
  template BasicTensor<T> class_score_gradient(const BasicModelState<T>&, const BasicTensor<T>&, \
                                               std::size_t, Tap);

MICROBIA_INSTANTIATE(float)
MICROBIA_INSTANTIATE(double)
#undef MICROBIA_INSTANTIATE

template BasicModelState<double> BasicModelState<float>::cast<double>() const;
template BasicModelState<float> BasicModelState<double>::cast<float>() const;
template BasicModelState<float> BasicModelState<float>::cast<float>() const;

}  // namespace microbia
