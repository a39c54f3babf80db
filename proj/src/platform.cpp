#include "rforksim/platform.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace rfork {

void FunctionModel::validate() const {
  if (name.empty()) throw ConfigError("function name must not be empty");
  if (image_mb == 0) throw ConfigError("function image_mb must be > 0");
  if (working_set_mb > image_mb)
    throw ConfigError("function '" + name + "': working_set_mb > image_mb");
  if (!(touch_ratio > 0.0) || touch_ratio > 1.0)
    throw ConfigError("function '" + name + "': touch_ratio must be in (0,1]");
  if (exec < 0) throw ConfigError("function '" + name + "': exec < 0");
}

const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Coldstart: return "coldstart";
    case Strategy::Caching: return "caching";
    case Strategy::CriuLocal: return "criu_local";
    case Strategy::CriuRemote: return "criu_remote";
    case Strategy::Mitosis: return "mitosis";
  }
  return "?";
}

Strategy parse_strategy(const std::string& name) {
  if (name == "coldstart") return Strategy::Coldstart;
  if (name == "caching") return Strategy::Caching;
  if (name == "criu_local") return Strategy::CriuLocal;
  if (name == "criu_remote") return Strategy::CriuRemote;
  if (name == "mitosis") return Strategy::Mitosis;
  throw ConfigError("unknown strategy '" + name + "'");
}

namespace {

std::string trim_copy(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

Dag parse_dag(std::istream& in, const std::string& origin) {
  Dag dag;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim_copy(line);
    if (line.empty()) continue;
    const auto cols = split(line, ',');
    if (cols.size() != 4)
      throw ConfigError(origin + ":" + std::to_string(lineno) +
                        ": expected node_id,function,upstreams,mode");
    DagNode n;
    n.id = trim_copy(cols[0]);
    n.function = trim_copy(cols[1]);
    const std::string ups = trim_copy(cols[2]);
    if (!ups.empty()) {
      for (const auto& u : split(ups, ';')) {
        const std::string v = trim_copy(u);
        if (!v.empty()) n.upstreams.push_back(v);
      }
    }
    const std::string mode = trim_copy(cols[3]);
    if (mode == "fork") n.mode = StateMode::Fork;
    else if (mode == "message") n.mode = StateMode::Message;
    else if (!mode.empty() && mode != "default")
      throw ConfigError(origin + ":" + std::to_string(lineno) +
                        ": unknown mode '" + mode + "'");
    dag.nodes.push_back(std::move(n));
  }
  return dag;
}

Dag load_dag(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open dag file '" + path + "'");
  return parse_dag(in, path);
}

// ---------------------------------------------------------------------------
// Coordinator

Coordinator::Coordinator(Cluster& cluster, Strategy strategy)
    : cluster_(cluster),
      strategy_(strategy),
      rng_(cluster.fabric().rng().fork(0x706c6174)) {
  invokers_.resize(cluster.machine_count());
  for (auto& inv : invokers_)
    inv.slot_free.assign(cluster.config().node_slots, 0);
}

void Coordinator::register_function(const FunctionModel& fn) {
  fn.validate();
  if (!functions_.emplace(fn.name, fn).second)
    throw ConfigError("function '" + fn.name + "' registered twice");
  const std::int64_t image_bytes = std::int64_t(fn.image_mb) << 20;
  if (strategy_ == Strategy::CriuLocal) {
    // Checkpoint images are pre-provisioned on every invoker.
    provisioned_[fn.name].add(static_cast<std::uint32_t>(invokers_.size()));
    for (auto& inv : invokers_) inv.provisioned_bytes += image_bytes;
  } else if (strategy_ == Strategy::CriuRemote) {
    provisioned_[fn.name].add(1);  // one image in the DFS
  }
}

const FunctionModel* Coordinator::function(const std::string& name) const {
  auto it = functions_.find(name);
  return it == functions_.end() ? nullptr : &it->second;
}

const ProvisionStats& Coordinator::provisioned(const std::string& fn) const {
  static const ProvisionStats zero;
  auto it = provisioned_.find(fn);
  return it == provisioned_.end() ? zero : it->second;
}

std::uint64_t Coordinator::hosted_seed_count() const {
  std::uint64_t n = 0;
  for (const auto& inv : invokers_) {
    for (const auto& s : inv.seeds)
      if (!s.retired) ++n;
  }
  return n;
}

NodeId Coordinator::pick_invoker() {
  const std::size_t n = invokers_.size();
  sim_assert(n > 0, "no invokers");
  std::optional<std::size_t> best;
  SimTime best_free = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t idx = (rr_next_ + i) % n;
    if (cluster_.fabric().node(NodeId{std::uint32_t(idx)}).crashed()) continue;
    const auto& sf = invokers_[idx].slot_free;
    const SimTime free_at = *std::min_element(sf.begin(), sf.end());
    if (!best || free_at < best_free) {
      best = idx;
      best_free = free_at;
    }
  }
  sim_assert(best.has_value(), "all invokers crashed");
  rr_next_ = static_cast<std::uint32_t>((*best + 1) % n);
  return NodeId{static_cast<std::uint32_t>(*best)};
}

std::pair<std::size_t, SimTime> Coordinator::reserve_slot(InvokerState& inv,
                                                          SimTime at) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < inv.slot_free.size(); ++i) {
    if (inv.slot_free[i] < inv.slot_free[best]) best = i;
  }
  return {best, std::max(at, inv.slot_free[best])};
}

void Coordinator::startup_coldstart(TaskClock& t, InvokerState& inv,
                                    const FunctionModel& fn,
                                    InvocationResult& r) {
  const SimTime t0 = t.now;
  if (inv.images.count(fn.name)) {
    t.now += cluster_.config().cost.coldstart_local;
  } else {
    t.now += cluster_.config().cost.coldstart_remote;
    inv.images.insert(fn.name);
    r.remote = true;
  }
  r.cold = true;
  r.startup_ns += t.now - t0;
}

std::size_t Coordinator::startup_caching(TaskClock& t, InvokerState& inv,
                                         const FunctionModel& fn,
                                         InvocationResult& r) {
  auto& pool = inv.cached[fn.name];
  const SimTime keepalive = cluster_.config().cost.cache_keepalive;
  const std::int64_t image_bytes = std::int64_t(fn.image_mb) << 20;

  // Evict instances that idled out before this invocation arrived.
  for (std::size_t i = 0; i < pool.size();) {
    if (pool[i].free_at <= t.now && pool[i].idle_since + keepalive <= t.now) {
      inv.provisioned_bytes -= image_bytes;
      provisioned_[fn.name].sub(1);
      pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(i));
    } else {
      ++i;
    }
  }

  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (pool[i].free_at <= t.now) {
      t.now += cluster_.config().cost.unpause;
      r.startup_ns += cluster_.config().cost.unpause;
      return i;
    }
  }

  const std::uint32_t cap = cluster_.config().caching_pool_cap;
  if (cap > 0 && pool.size() >= cap) {
    // Paused instances are all busy; a capped pool queues the invocation.
    std::size_t best = 0;
    for (std::size_t i = 1; i < pool.size(); ++i)
      if (pool[i].free_at < pool[best].free_at) best = i;
    const SimTime wait = pool[best].free_at - t.now;
    r.queue_ns += wait;
    t.now = pool[best].free_at;
    t.now += cluster_.config().cost.unpause;
    r.startup_ns += cluster_.config().cost.unpause;
    return best;
  }

  // One paused container serves one concurrent invocation; miss means a
  // fresh instance, which pays a full coldstart.
  startup_coldstart(t, inv, fn, r);
  pool.push_back(CachedInstance{t.now, t.now});
  provisioned_[fn.name].add(1);
  inv.provisioned_bytes += image_bytes;
  return pool.size() - 1;
}

Container* Coordinator::resume_from_seed(TaskClock& t, NodeId node,
                                         const DescriptorId& id,
                                         InvocationResult& r) {
  const SimTime t0 = t.now;
  auto res = cluster_.fork_resume(t, node, id);
  if (!res.ok()) {
    r.error = res.error();
    t.now = t0;  // the failed attempt's charge is re-added by the fallback
    return nullptr;
  }
  r.remote = node != id.node;
  r.net_bytes += res->descriptor_bytes;
  r.startup_ns += t.now - t0;
  return res->child;
}

void Coordinator::plant_seed(TaskClock& t, NodeId node, const FunctionModel& fn) {
  Container& seed = cluster_.create_root(node);
  cluster_.add_vma(seed, 0, kContainerBaseVa,
                   kContainerBaseVa + (std::uint64_t(fn.image_mb) << 20));
  cluster_.fill_pages(seed, kContainerBaseVa / kPageSize, fn.image_pages(), 0);
  auto id = cluster_.fork_prepare(t, seed);
  sim_assert(id.ok(), "seed prepare failed");

  invokers_[node.addr].seeds.push_back(
      HostedSeed{id.value(), t.now, SeedKind::LongLived, fn.name, false});
  store_[fn.name] = SeedRecord{fn.name, id.value(), t.now, SeedKind::LongLived};
  provisioned_[fn.name].add(1);
  invokers_[node.addr].provisioned_bytes += std::int64_t(fn.image_mb) << 20;
  planting_.erase(fn.name);
}

void Coordinator::retire_hosted(const DescriptorId& id) {
  for (auto& inv : invokers_) {
    for (auto& s : inv.seeds) {
      if (s.id == id) s.retired = true;
    }
  }
}

Result<DescriptorId> Coordinator::renew_seed(TaskClock& t, SeedRecord& rec) {
  if (cluster_.fabric().node(rec.id.node).crashed())
    return Result<DescriptorId>(Err::Timeout);
  Machine& m = cluster_.machine(rec.id.node);
  const auto* host_rec = m.host().find(rec.id.handle_id);
  if (!host_rec) return Result<DescriptorId>(Err::NoSuchDescriptor);
  Container* seed = m.container(host_rec->container_id);
  if (!seed) return Result<DescriptorId>(Err::NoSuchDescriptor);

  auto fresh = cluster_.fork_prepare(t, *seed);
  if (!fresh.ok()) return fresh;
  retire_hosted(rec.id);
  invokers_[rec.id.node.addr].seeds.push_back(
      HostedSeed{fresh.value(), t.now, SeedKind::LongLived, rec.function, false});
  rec.id = fresh.value();
  rec.deployed_at = t.now;
  return fresh;
}

Container* Coordinator::startup_mitosis(TaskClock& t, NodeId node,
                                        const FunctionModel& fn,
                                        InvocationResult& r) {
  auto it = store_.find(fn.name);
  if (it != store_.end()) {
    SeedRecord& rec = it->second;
    const SimTime expiry = rec.deployed_at + cluster_.config().seed_keepalive;
    if (t.now >= expiry) {
      retire_hosted(rec.id);  // gc reclaims once references drain
      store_.erase(it);
    } else {
      if (expiry - t.now < cluster_.config().renewal_margin) {
        auto renewed = renew_seed(t, rec);
        if (!renewed.ok()) {
          retire_hosted(rec.id);
          store_.erase(it);
          startup_coldstart(t, *&invokers_[node.addr], fn, r);
          if (!planting_.count(fn.name)) planting_.insert(fn.name);
          return nullptr;
        }
      }
      Container* c = resume_from_seed(t, node, rec.id, r);
      if (c) return c;
      // Seed unusable (crashed node, raced reclaim): fall back to coldstart
      // and let a fresh seed be planted.
      retire_hosted(rec.id);
      store_.erase(fn.name);
    }
  }
  startup_coldstart(t, invokers_[node.addr], fn, r);
  if (!store_.count(fn.name) && !planting_.count(fn.name) &&
      !coordinator_crashed_by(t.now)) {
    planting_.insert(fn.name);
  }
  return nullptr;
}

void Coordinator::run_exec(TaskClock& t, Container* container,
                           const FunctionModel& fn, std::uint64_t region_vpn,
                           std::uint64_t region_pages, std::uint64_t touched,
                           InvocationResult& r) {
  const SimTime t0 = t.now;
  if (container) {
    // Touch a seeded uniform sample of the region, without replacement.
    touched = std::min<std::uint64_t>(touched, region_pages);
    Rng draw = rng_.fork(0x65786563 ^ container->id);
    std::vector<std::uint32_t> idx(region_pages);
    for (std::uint32_t i = 0; i < region_pages; ++i) idx[i] = i;
    for (std::uint64_t i = 0; i < touched; ++i) {
      const std::uint64_t j = i + draw.bounded(region_pages - i);
      std::swap(idx[i], idx[j]);
      const std::uint64_t va = (region_vpn + idx[i]) * kPageSize;
      auto res = container->space.touch(t, va, AccessKind::Read);
      if (!res.ok()) {
        r.failed = true;
        r.error = res.error();
        break;
      }
    }
    r.paging = container->space.stats;
    r.net_bytes += r.paging.bytes_over_network;
  } else if (strategy_ == Strategy::CriuRemote) {
    // Every touched page is a DFS read.
    t.now += static_cast<SimTime>(touched) *
             cluster_.config().cost.dfs_read_per_page;
  }
  t.now += fn.exec;
  r.exec_ns = t.now - t0;
}

InvocationResult Coordinator::run_invocation(SimTime arrival,
                                             const std::string& name,
                                             std::optional<NodeId> pinned) {
  const FunctionModel* fn = function(name);
  if (!fn) throw ConfigError("invoke of unregistered function '" + name + "'");

  InvocationResult r;
  r.arrival = arrival;
  r.function = name;
  r.strategy = strategy_;

  const NodeId node = pinned ? *pinned : pick_invoker();
  r.invoker = node;
  InvokerState& inv = invokers_[node.addr];
  auto [slot, start] = reserve_slot(inv, arrival);
  r.queue_ns = start - arrival;
  TaskClock t{start};

  Container* container = nullptr;
  std::size_t cache_idx = 0;
  bool used_cache_instance = false;
  switch (strategy_) {
    case Strategy::Coldstart:
      startup_coldstart(t, inv, *fn, r);
      break;
    case Strategy::Caching:
      cache_idx = startup_caching(t, inv, *fn, r);
      used_cache_instance = true;
      break;
    case Strategy::CriuLocal:
      t.now += cluster_.config().cost.cr_restore_local;
      r.startup_ns += cluster_.config().cost.cr_restore_local;
      break;
    case Strategy::CriuRemote:
      t.now += cluster_.config().cost.cr_restore_remote;
      r.startup_ns += cluster_.config().cost.cr_restore_remote;
      break;
    case Strategy::Mitosis:
      container = startup_mitosis(t, node, *fn, r);
      break;
  }

  run_exec(t, container, *fn, kContainerBaseVa / kPageSize,
           fn->working_set_pages(), fn->touched_pages(), r);

  if (container) cluster_.finish_container(t, *container);
  if (strategy_ == Strategy::Mitosis && r.cold && planting_.count(name) &&
      !coordinator_crashed_by(t.now)) {
    plant_seed(t, node, *fn);
  }
  if (used_cache_instance) {
    auto& instance = inv.cached[name][cache_idx];
    instance.free_at = t.now;
    instance.idle_since = t.now;
  }
  inv.slot_free[slot] = t.now;
  r.done = t.now;
  return r;
}

InvocationResult Coordinator::invoke(SimTime arrival, const std::string& name) {
  return run_invocation(arrival, name, std::nullopt);
}

InvocationResult Coordinator::invoke_on(SimTime arrival, const std::string& name,
                                        NodeId invoker) {
  return run_invocation(arrival, name, invoker);
}

// ---------------------------------------------------------------------------
// Workflows

WorkflowResult Coordinator::run_workflow(SimTime arrival, const Dag& dag,
                                         StateMode default_mode) {
  struct NodeRun {
    const DagNode* spec = nullptr;
    StateMode mode = StateMode::Fork;
    bool fork_successor = false;  // some downstream forks from this node
    Container* container = nullptr;
    std::optional<DescriptorId> seed;
    SimTime finish = 0;
    int depth = 0;
    bool ran = false;
  };

  std::map<std::string, NodeRun> runs;
  for (const auto& n : dag.nodes) {
    if (!function(n.function))
      throw ConfigError("workflow references unregistered function '" +
                        n.function + "'");
    if (runs.count(n.id))
      throw ConfigError("duplicate workflow node '" + n.id + "'");
    NodeRun nr;
    nr.spec = &n;
    nr.mode = n.mode.value_or(default_mode);
    // State transfer from several upstreams falls back to messaging unless
    // the user fused the upstream functions.
    if (n.upstreams.size() >= 2) nr.mode = StateMode::Message;
    runs.emplace(n.id, nr);
  }
  for (const auto& n : dag.nodes) {
    for (const auto& u : n.upstreams) {
      auto it = runs.find(u);
      if (it == runs.end())
        throw ConfigError("workflow node '" + n.id + "' references unknown '" +
                          u + "'");
      if (runs.at(n.id).mode == StateMode::Fork) it->second.fork_successor = true;
    }
  }
  if (strategy_ != Strategy::Mitosis) {
    for (const auto& [id, nr] : runs) {
      (void)id;
      if (nr.mode == StateMode::Fork && !nr.spec->upstreams.empty())
        throw ConfigError("fork-mode workflow edges need the mitosis strategy");
      if (nr.fork_successor)
        throw ConfigError("fork-mode workflow edges need the mitosis strategy");
    }
  }

  // Topological order.
  std::vector<const DagNode*> order;
  std::map<std::string, std::size_t> missing;
  for (const auto& n : dag.nodes) missing[n.id] = n.upstreams.size();
  while (order.size() < dag.nodes.size()) {
    bool progress = false;
    for (const auto& n : dag.nodes) {
      if (missing[n.id] != 0) continue;
      missing[n.id] = SIZE_MAX;
      order.push_back(&n);
      for (const auto& m : dag.nodes) {
        for (const auto& u : m.upstreams) {
          if (u == n.id && missing[m.id] != SIZE_MAX) --missing[m.id];
        }
      }
      progress = true;
    }
    if (!progress) throw ConfigError("workflow graph has a cycle");
  }

  WorkflowResult wf;
  wf.workflow_id = next_workflow_++;
  wf.started = arrival;

  // Prepared upstreams become short-lived seeds; the prepare is charged on
  // the upstream's critical path (its results ride the function reply).
  auto prepare_as_seed = [&](TaskClock& t, Container& c, const FunctionModel& fn,
                             NodeRun& nr) {
    auto id = cluster_.fork_prepare(t, c);
    if (!id.ok()) {
      cluster_.finish_container(t, c);
      return;
    }
    nr.seed = id.value();
    nr.container = &c;
    invokers_[id->node.addr].seeds.push_back(
        HostedSeed{id.value(), t.now, SeedKind::ShortLived, fn.name, false});
  };

  // A workflow node started through the regular strategy path (roots and
  // message-mode downstreams).
  auto invoke_node = [&](SimTime ready, const FunctionModel& fn,
                         NodeRun& nr) -> InvocationResult {
    InvocationResult r;
    r.arrival = ready;
    r.function = fn.name;
    r.strategy = strategy_;
    const NodeId node = pick_invoker();
    r.invoker = node;
    InvokerState& inv = invokers_[node.addr];
    auto [slot, start] = reserve_slot(inv, ready);
    r.queue_ns = start - ready;
    TaskClock t{start};

    Container* c = nullptr;
    std::size_t cache_idx = 0;
    bool used_cache = false;
    switch (strategy_) {
      case Strategy::Coldstart:
        startup_coldstart(t, inv, fn, r);
        break;
      case Strategy::Caching:
        cache_idx = startup_caching(t, inv, fn, r);
        used_cache = true;
        break;
      case Strategy::CriuLocal:
        t.now += cluster_.config().cost.cr_restore_local;
        r.startup_ns += cluster_.config().cost.cr_restore_local;
        break;
      case Strategy::CriuRemote:
        t.now += cluster_.config().cost.cr_restore_remote;
        r.startup_ns += cluster_.config().cost.cr_restore_remote;
        break;
      case Strategy::Mitosis:
        c = startup_mitosis(t, node, fn, r);
        break;
    }
    run_exec(t, c, fn, kContainerBaseVa / kPageSize, fn.working_set_pages(),
             fn.touched_pages(), r);

    if (nr.fork_successor && !r.failed) {
      if (!c) {
        // Coldstarted container: materialize it so downstreams can fork
        // from its produced state.
        Container& fresh = cluster_.create_root(node);
        cluster_.add_vma(fresh, 0, kContainerBaseVa,
                         kContainerBaseVa + (std::uint64_t(fn.image_mb) << 20));
        cluster_.fill_pages(fresh, kContainerBaseVa / kPageSize,
                            fn.image_pages(), 0);
        c = &fresh;
      }
      prepare_as_seed(t, *c, fn, nr);
    } else if (c) {
      cluster_.finish_container(t, *c);
    }
    if (strategy_ == Strategy::Mitosis && r.cold && planting_.count(fn.name) &&
        !coordinator_crashed_by(t.now)) {
      plant_seed(t, node, fn);
    }
    if (used_cache) {
      auto& instance = inv.cached[fn.name][cache_idx];
      instance.free_at = t.now;
      instance.idle_since = t.now;
    }
    inv.slot_free[slot] = t.now;
    r.done = t.now;
    return r;
  };

  for (const DagNode* spec : order) {
    NodeRun& nr = runs.at(spec->id);
    const FunctionModel& fn = *function(spec->function);

    SimTime ready = arrival;
    for (const auto& u : spec->upstreams)
      ready = std::max(ready, runs.at(u).finish);
    if (coordinator_crashed_by(ready)) continue;  // never dispatched

    InvocationResult r;
    if (spec->upstreams.empty()) {
      r = invoke_node(ready, fn, nr);
    } else if (nr.mode == StateMode::Fork) {
      // Single upstream; its pre-materialized state is the child's memory.
      NodeRun& up = runs.at(spec->upstreams[0]);
      r.arrival = ready;
      r.function = fn.name;
      r.strategy = strategy_;
      if (!up.ran || !up.seed) {
        r.failed = true;
        r.error = Err::NoSuchDescriptor;
      } else {
        nr.depth = up.depth + 1;
        const NodeId node = pick_invoker();
        r.invoker = node;
        InvokerState& inv = invokers_[node.addr];
        auto [slot, start] = reserve_slot(inv, ready);
        r.queue_ns = start - ready;
        TaskClock t{start};
        Container* c = resume_from_seed(t, node, *up.seed, r);
        if (!c) {
          r.failed = true;
        } else {
          const FunctionModel& up_fn = *function(up.spec->function);
          const std::uint64_t region = up_fn.working_set_pages();
          const double raw = fn.touch_ratio * static_cast<double>(region);
          auto touched = static_cast<std::uint64_t>(raw);
          if (raw > static_cast<double>(touched)) ++touched;
          run_exec(t, c, fn, kContainerBaseVa / kPageSize, region, touched, r);
          if (!r.failed && nr.fork_successor) {
            prepare_as_seed(t, *c, fn, nr);
          } else {
            cluster_.finish_container(t, *c);
          }
        }
        inv.slot_free[slot] = t.now;
        r.done = t.now;
      }
    } else {
      // Message mode: pay serialization plus store round trips, then start
      // the function through the regular path.
      std::uint64_t state_mb = 0;
      for (const auto& u : spec->upstreams)
        state_mb += function(runs.at(u).spec->function)->working_set_mb;
      const SimTime ser =
          static_cast<SimTime>(state_mb) * cluster_.config().serialize_per_mb;
      const SimTime store = static_cast<SimTime>(state_mb) * 2 *
                            cluster_.config().cost.dfs_read_per_page;
      wf.serialization_ns += ser;
      r = invoke_node(ready + ser + store, fn, nr);
      r.arrival = ready;
      r.queue_ns += ser + store;  // transfer sits on the critical path
    }
    nr.ran = !r.failed;
    nr.finish = r.failed ? ready : r.done;
    wf.invocations.push_back(std::move(r));
    wf.finished = std::max(wf.finished, nr.finish);
  }

  // Tear the fork tree down: every short-lived seed goes, deepest first, so
  // a node is reclaimed only after all its descendants released it. A
  // long-lived root is not part of the tree.
  if (!coordinator_crashed_by(wf.finished)) {
    TaskClock td{wf.finished};
    std::vector<NodeRun*> prepared;
    for (auto& [id, nr] : runs) {
      (void)id;
      if (nr.seed) prepared.push_back(&nr);
    }
    std::sort(prepared.begin(), prepared.end(),
              [](const NodeRun* a, const NodeRun* b) { return a->depth > b->depth; });
    for (NodeRun* nr : prepared) {
      if (cluster_.fabric().node(nr->seed->node).crashed()) continue;
      cluster_.check_reclaim_safety(*nr->seed);
      auto res = cluster_.fork_reclaim(td, *nr->seed);
      if (res.ok()) {
        auto& seeds = invokers_[nr->seed->node.addr].seeds;
        for (std::size_t i = 0; i < seeds.size(); ++i) {
          if (seeds[i].id == *nr->seed) {
            seeds.erase(seeds.begin() + static_cast<std::ptrdiff_t>(i));
            break;
          }
        }
      }
    }
    wf.torn_down = true;
  }
  return wf;
}

// ---------------------------------------------------------------------------
// GC

std::vector<DescriptorId> Coordinator::gc_tick(NodeId node, TaskClock& t) {
  std::vector<DescriptorId> reclaimed;
  if (cluster_.fabric().node(node).crashed()) return reclaimed;
  InvokerState& inv = invokers_[node.addr];

  for (std::size_t i = 0; i < inv.seeds.size();) {
    HostedSeed& s = inv.seeds[i];
    const SimTime limit = s.kind == SeedKind::ShortLived
                              ? cluster_.config().max_function_lifetime
                              : cluster_.config().seed_keepalive;
    const bool due = s.retired || (t.now - s.deployed_at > limit);
    if (!due || cluster_.live_refs(s.id.node, s.id.handle_id) > 0) {
      ++i;
      continue;
    }
    cluster_.check_reclaim_safety(s.id);
    auto res = cluster_.fork_reclaim(t, s.id);
    if (res.ok()) reclaimed.push_back(s.id);
    if (!coordinator_crashed_by(t.now)) {
      auto it = store_.find(s.function);
      if (it != store_.end() && it->second.id == s.id) store_.erase(it);
      planting_.erase(s.function);
    }
    if (s.kind == SeedKind::LongLived) {
      const FunctionModel* fn = function(s.function);
      if (fn) {
        provisioned_[s.function].sub(1);
        inv.provisioned_bytes -= std::int64_t(fn->image_mb) << 20;
      }
    }
    inv.seeds.erase(inv.seeds.begin() + static_cast<std::ptrdiff_t>(i));
  }

  // Fn-style cache eviction and page-table cache expiry ride the same timer.
  const SimTime keepalive = cluster_.config().cost.cache_keepalive;
  for (auto& [fname, pool] : inv.cached) {
    const FunctionModel* fn = function(fname);
    const std::int64_t bytes = fn ? std::int64_t(fn->image_mb) << 20 : 0;
    for (std::size_t i = 0; i < pool.size();) {
      if (pool[i].free_at <= t.now && pool[i].idle_since + keepalive <= t.now) {
        inv.provisioned_bytes -= bytes;
        provisioned_[fname].sub(1);
        pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(i));
      } else {
        ++i;
      }
    }
  }
  cluster_.machine(node).pt_cache().drop_expired(t.now);
  return reclaimed;
}

void Coordinator::start_gc() {
  if (gc_started_) return;
  gc_started_ = true;
  schedule_gc_event(NodeId{0});
}

// One timer drives every invoker's tick, sweeping to a fixpoint so a chain
// of seeds (child pinning parent pinning grandparent) collapses within a
// single period once the leaves expire.
void Coordinator::schedule_gc_event(NodeId) {
  cluster_.loop().schedule_in(cluster_.config().gc_period, [this] {
    TaskClock t{cluster_.loop().now()};
    bool progress = true;
    while (progress) {
      progress = false;
      for (std::size_t i = 0; i < invokers_.size(); ++i) {
        if (!gc_tick(NodeId{static_cast<std::uint32_t>(i)}, t).empty())
          progress = true;
      }
    }
    schedule_gc_event(NodeId{0});
  });
}

}  // namespace rfork
